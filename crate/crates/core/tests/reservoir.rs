mod support;

use cdemap_core::reservoir::{
    export_triples, ComponentRole, ConceptRef, EnqueueRequest, Judgement, Reservoir,
    ReservoirError, ReviewContext, ReviewDecision, ReviewStatus,
};
use proptest::prelude::*;
use support::*;

fn concept(id: i64, role: Option<ComponentRole>) -> ConceptRef {
    let store = store("clinical");
    ConceptRef { code: store.get(id).unwrap().code.clone(), omop_id: id, role }
}

fn request(label: &str, concepts: Vec<ConceptRef>, judgement: Judgement) -> EnqueueRequest {
    EnqueueRequest { label: label.into(), concepts, judgement, context: ReviewContext::default() }
}

#[test]
fn composite_entry_exports_unit_link() {
    let res = Reservoir::in_memory(store("clinical"));
    let id = res
        .enqueue(request("NT-proBNP pmol/L", vec![concept(520, None), concept(400, Some(ComponentRole::Unit))], Judgement::Correct))
        .unwrap()
        .unwrap();
    let entry = res.apply_decision(id, ReviewDecision::Approve, Some("r1")).unwrap();
    let lines: Vec<String> = export_triples(&entry).iter().map(|t| t.to_ntriples()).collect();
    assert_eq!(
        lines,
        [
            "<NT-proBNP%20pmol/L> <mapsTo> <520> .",
            "<520> <hasCode> <33762-6> .",
            "<NT-proBNP%20pmol/L> <mapsTo> <400> .",
            "<400> <hasCode> <pmol/L> .",
            "<520> <hasUnit> <400> .",
        ]
    );
    assert_eq!(res.export_all_triples().len(), 5);
    assert_eq!(res.export_dictionary()[0].concepts.len(), 2);
}

#[test]
fn pending_pages_follow_creation_order() {
    let res = Reservoir::in_memory(store("clinical"));
    for label in ["a", "b", "c", "d", "e"] {
        res.enqueue(request(label, vec![concept(100, None)], Judgement::PartiallyCorrect)).unwrap();
    }
    let page = |p| res.list_pending(p, 2).into_iter().map(|e| e.label).collect::<Vec<_>>();
    assert_eq!(page(0), ["a", "b"]);
    assert_eq!(page(2), ["e"]);
    assert!(page(3).is_empty());
    assert_eq!(res.pending_count(), 5);
}

#[test]
fn reopened_log_keeps_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.log");
    {
        let res = Reservoir::open(&path, store("clinical")).unwrap();
        let id = res.enqueue(request("heart attack", vec![concept(100, None)], Judgement::Correct)).unwrap().unwrap();
        res.apply_decision(id, ReviewDecision::Approve, None).unwrap();
    }
    let res = Reservoir::open(&path, store("clinical")).unwrap();
    assert_eq!(res.lookup("HEART ATTACK").unwrap().omop_ids(), [100].into());
    let err = res.apply_decision(1, ReviewDecision::Reject, None).unwrap_err();
    assert!(matches!(err, ReservoirError::NotPending { .. }), "{err}");
}

#[derive(Debug, Clone)]
enum Op {
    Enqueue(u8, u8),
    Approve(u8),
    Reject(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4, 0u8..3).prop_map(|(l, j)| Op::Enqueue(l, j)),
        (1u8..12).prop_map(Op::Approve),
        (1u8..12).prop_map(Op::Reject),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_judged_and_approved_entries_are_served(ops in prop::collection::vec(op(), 1..40)) {
        let res = Reservoir::in_memory(store("clinical"));
        let labels = ["heart attack", "pmol/L", "man", "baseline"];
        for op in ops {
            match op {
                Op::Enqueue(l, j) => {
                    let judgement = [Judgement::Correct, Judgement::PartiallyCorrect, Judgement::Incorrect][j as usize];
                    let queued = res.enqueue(request(labels[l as usize], vec![concept(100, None)], judgement)).unwrap();
                    prop_assert_eq!(queued.is_none(), judgement == Judgement::Incorrect);
                }
                Op::Approve(id) | Op::Reject(id) => {
                    let decision = if matches!(op, Op::Approve(_)) { ReviewDecision::Approve } else { ReviewDecision::Reject };
                    let before = res.get(id as u64);
                    let after = res.apply_decision(id as u64, decision, None);
                    match before {
                        Some(b) if b.review_status == ReviewStatus::Pending => prop_assert!(after.is_ok()),
                        _ => prop_assert!(after.is_err()),
                    }
                }
            }
            for label in labels {
                if let Some(e) = res.lookup(label) {
                    prop_assert!(e.judgement != Judgement::Incorrect);
                    prop_assert!(e.review_status.is_servable());
                    prop_assert!(e.decided_at.is_some());
                }
            }
        }
    }
}
