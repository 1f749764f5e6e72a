mod support;

use std::collections::BTreeSet;

use cdemap_core::text::normalize_surface;
use cdemap_core::vocab::{
    expand_synonyms, load_kb_dir, Concept, ConceptRelationship, ConceptStore, ExpansionConfig,
    VocabError,
};
use proptest::prelude::*;
use support::*;

fn write_kb(dir: &std::path::Path, concepts: &str, synonyms: Option<&str>, relationships: Option<&str>) {
    std::fs::write(dir.join("concepts.csv"), concepts).unwrap();
    if let Some(s) = synonyms {
        std::fs::write(dir.join("synonyms.csv"), s).unwrap();
    }
    if let Some(r) = relationships {
        std::fs::write(dir.join("relationships.csv"), r).unwrap();
    }
}

const HEADER: &str = "omop_id,code,name,vocabulary,domain,semantic_type,is_standard\n";

#[test]
fn fixture_stores_load() {
    assert_eq!(raw_store("mini").len(), 4);
    assert_eq!(raw_store("mapsto").len(), 3);
    let clinical = store("clinical");
    assert!(clinical.vocabularies().contains("UCUM"));
    assert_eq!(clinical.lookup_by_code("LOINC", "33762-6").unwrap().omop_id, 520);
    assert_eq!(clinical.get(110).unwrap().parents, BTreeSet::from([100]));
}

#[test]
fn heart_attack_is_found_under_its_synonym() {
    let mini = store("mini");
    let hits: Vec<i64> = mini.find_exact("Heart  Attack").iter().map(|c| c.omop_id).collect();
    assert_eq!(hits, [100]);
    assert!(mini.find_exact("heart").is_empty());
}

#[test]
fn missing_concepts_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_kb_dir(dir.path()).unwrap_err();
    assert!(matches!(err, VocabError::Io { .. }), "{err}");
}

#[test]
fn bad_rows_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_kb(dir.path(), &format!("{HEADER}1,A,Alpha,SNOMED,Condition,,1\n2,B,,SNOMED,Condition,,1\n"), None, None);
    match load_kb_dir(dir.path()).unwrap_err() {
        VocabError::MalformedRow { line, .. } => assert_eq!(line, 3),
        e => panic!("unexpected {e}"),
    }

    write_kb(dir.path(), &format!("{HEADER}1,A,Alpha,SNOMED,Condition,,1\n"), Some("omop_id,synonym\n1,alpha one\n9,ghost\n"), None);
    match load_kb_dir(dir.path()).unwrap_err() {
        VocabError::DanglingReference { line, omop_id } => assert_eq!((line, omop_id), (3, 9)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn ucum_units_match_code_and_label() {
    let clinical = store("clinical");
    for (surface, id) in [("mm[Hg]", 420), ("pmol/L", 400), ("picomole per liter", 400), ("%", 440)] {
        let ids: Vec<i64> = clinical.find_exact(surface).iter().map(|c| c.omop_id).collect();
        assert!(ids.contains(&id), "{surface}: {ids:?}");
    }
}

#[test]
fn brand_and_ingredient_forms_flow_to_the_source() {
    let mapsto = store("mapsto");
    let atc = mapsto.get(300).unwrap();
    assert!(atc.synonyms.contains("coreg"));
    assert!(atc.synonyms.contains("coreg cr"));
    let rx = mapsto.get(301).unwrap();
    assert!(rx.synonyms.contains("coreg cr"));
    assert!(mapsto.get(302).unwrap().synonyms.is_empty());
}

prop_compose! {
    fn arb_store()(
        names in prop::collection::vec("[a-c]{1,3}( [a-c]{1,3})?", 1..8),
        synonyms in prop::collection::vec(prop::collection::btree_set("[a-c]{1,4}", 0..3), 8),
        edges in prop::collection::vec((0usize..8, 0usize..8, 0usize..3), 0..12),
    ) -> ConceptStore {
        let concepts: Vec<Concept> = names
            .iter()
            .enumerate()
            .map(|(i, name)| Concept {
                omop_id: i as i64 + 1,
                code: format!("c{i}"),
                name: name.clone(),
                vocabulary: "V".into(),
                domain: "Condition".into(),
                semantic_type: None,
                synonyms: synonyms[i].iter().map(|s| normalize_surface(s)).filter(|s| *s != normalize_surface(name)).collect(),
                parents: BTreeSet::new(),
                is_standard: true,
            })
            .collect();
        let n = concepts.len();
        let relationships = edges
            .into_iter()
            .map(|(a, b, r)| ConceptRelationship {
                source_omop_id: (a % n) as i64 + 1,
                target_omop_id: (b % n) as i64 + 1,
                relation: ["Maps to", "Trade name", "Has ingredient"][r].into(),
            })
            .collect();
        ConceptStore::from_parts(concepts, relationships).unwrap()
    }
}

proptest! {
    #[test]
    fn expansion_is_idempotent(store in arb_store()) {
        let cfg = ExpansionConfig::default();
        let once = expand_synonyms(store, &cfg);
        let twice = expand_synonyms(once.clone(), &cfg);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn expansion_only_adds_and_never_repeats_the_name(store in arb_store()) {
        let once = expand_synonyms(store.clone(), &ExpansionConfig::default());
        for c in store.concepts() {
            let after = once.get(c.omop_id).unwrap();
            prop_assert!(c.synonyms.is_subset(&after.synonyms));
            prop_assert!(!after.synonyms.contains(&normalize_surface(&after.name)));
        }
    }
}
