//! Controlled-vocabulary concept store.
//!
//! Concepts are loaded from three CSV exports (concepts, synonyms,
//! relationships) laid out like OMOP vocabulary tables, validated, and then
//! optionally enriched by [`expand_synonyms`]. After loading the store is
//! immutable and can be shared freely between threads.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::text::normalize_surface;

/// Globally unique concept identifier.
pub type OmopId = i64;

/// Relation name that contributes to [`Concept::parents`].
pub const IS_A: &str = "Is a";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed row at line {line}: {reason}")]
    MalformedRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("duplicate concept at line {line}: {detail}")]
    DuplicateConcept { line: u64, detail: String },
    #[error("dangling reference at line {line}: omop_id {omop_id} is not in the store")]
    DanglingReference { line: u64, omop_id: OmopId },
    #[error("concept not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub omop_id: OmopId,
    /// Vocabulary-local code, e.g. `22298006` or `pmol/L`.
    pub code: String,
    pub name: String,
    pub vocabulary: String,
    pub domain: String,
    pub semantic_type: Option<String>,
    /// Normalized alternative surface forms, never containing the name itself.
    pub synonyms: BTreeSet<String>,
    pub parents: BTreeSet<OmopId>,
    pub is_standard: bool,
}

impl Concept {
    /// Canonical name followed by every synonym.
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRelationship {
    pub source_omop_id: OmopId,
    pub target_omop_id: OmopId,
    pub relation: String,
}

/// Settings for [`expand_synonyms`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionConfig {
    /// Relations whose target's surface forms are merged into the source.
    pub merge_relations: BTreeSet<String>,
    /// Vocabularies whose codes are themselves surface forms (e.g. UCUM).
    pub flat_vocabularies: BTreeSet<String>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            merge_relations: ["Maps to", "Trade name"].into_iter().map(String::from).collect(),
            flat_vocabularies: ["UCUM"].into_iter().map(String::from).collect(),
        }
    }
}

/// Immutable, validated set of concepts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptStore {
    concepts: BTreeMap<OmopId, Concept>,
    relationships: Vec<ConceptRelationship>,
    /// Synonyms as loaded, before any expansion. Expansion always derives
    /// from this so that it can be re-applied without drifting.
    loaded_synonyms: BTreeMap<OmopId, BTreeSet<String>>,
    by_code: HashMap<(String, String), OmopId>,
    surfaces: HashMap<String, BTreeSet<OmopId>>,
}

impl ConceptStore {
    /// Builds a store from in-memory parts, enforcing every concept invariant.
    ///
    /// Parents given on the concepts are kept; `Is a` relationships add more.
    pub fn from_parts(
        concepts: Vec<Concept>,
        relationships: Vec<ConceptRelationship>,
    ) -> Result<Self, VocabError> {
        let mut map = BTreeMap::new();
        let mut by_code = HashMap::new();
        for (idx, mut concept) in concepts.into_iter().enumerate() {
            let line = idx as u64 + 1;
            let key = (concept.vocabulary.clone(), concept.code.clone());
            if by_code.contains_key(&key) {
                return Err(VocabError::DuplicateConcept {
                    line,
                    detail: format!("({}, {:?})", concept.vocabulary, concept.code),
                });
            }
            if map.contains_key(&concept.omop_id) {
                return Err(VocabError::DuplicateConcept {
                    line,
                    detail: format!("omop_id {}", concept.omop_id),
                });
            }
            concept.synonyms = clean_synonyms(&concept.name, concept.synonyms.iter());
            by_code.insert(key, concept.omop_id);
            map.insert(concept.omop_id, concept);
        }
        for (idx, concept) in map.values().enumerate() {
            if let Some(missing) = concept.parents.iter().find(|p| !map.contains_key(p)) {
                return Err(VocabError::DanglingReference {
                    line: idx as u64 + 1,
                    omop_id: *missing,
                });
            }
        }
        for (idx, rel) in relationships.iter().enumerate() {
            let line = idx as u64 + 1;
            if rel.relation.trim().is_empty() {
                return Err(VocabError::MalformedRow {
                    file: "relationships".into(),
                    line,
                    reason: "empty relation".into(),
                });
            }
            for id in [rel.source_omop_id, rel.target_omop_id] {
                if !map.contains_key(&id) {
                    return Err(VocabError::DanglingReference { line, omop_id: id });
                }
            }
        }
        for rel in &relationships {
            if rel.relation == IS_A && rel.source_omop_id != rel.target_omop_id {
                if let Some(c) = map.get_mut(&rel.source_omop_id) {
                    c.parents.insert(rel.target_omop_id);
                }
            }
        }
        let loaded_synonyms = map.iter().map(|(id, c)| (*id, c.synonyms.clone())).collect();
        let mut store = Self {
            concepts: map,
            relationships,
            loaded_synonyms,
            by_code,
            surfaces: HashMap::new(),
        };
        store.rebuild_surfaces();
        Ok(store)
    }

    fn rebuild_surfaces(&mut self) {
        let mut surfaces: HashMap<String, BTreeSet<OmopId>> = HashMap::new();
        for concept in self.concepts.values() {
            for form in concept.surface_forms() {
                surfaces.entry(normalize_surface(form)).or_default().insert(concept.omop_id);
            }
        }
        self.surfaces = surfaces;
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Concepts in ascending omop_id order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn relationships(&self) -> &[ConceptRelationship] {
        &self.relationships
    }

    pub fn vocabularies(&self) -> BTreeSet<&str> {
        self.concepts.values().map(|c| c.vocabulary.as_str()).collect()
    }

    pub fn contains(&self, omop_id: OmopId) -> bool {
        self.concepts.contains_key(&omop_id)
    }

    pub fn get(&self, omop_id: OmopId) -> Option<&Concept> {
        self.concepts.get(&omop_id)
    }

    pub fn get_concept(&self, omop_id: OmopId) -> Result<&Concept, VocabError> {
        self.get(omop_id)
            .ok_or_else(|| VocabError::NotFound(format!("omop_id {omop_id}")))
    }

    pub fn lookup_by_code(&self, vocabulary: &str, code: &str) -> Result<&Concept, VocabError> {
        self.by_code
            .get(&(vocabulary.to_owned(), code.to_owned()))
            .and_then(|id| self.concepts.get(id))
            .ok_or_else(|| VocabError::NotFound(format!("{vocabulary}:{code}")))
    }

    /// Every concept with a name or synonym equal to `surface` after
    /// normalization, ordered by omop_id.
    pub fn find_exact(&self, surface: &str) -> Vec<&Concept> {
        self.surfaces
            .get(&normalize_surface(surface))
            .map(|ids| ids.iter().filter_map(|id| self.concepts.get(id)).collect())
            .unwrap_or_default()
    }

    /// Number of concepts carrying at least one synonym, per vocabulary.
    pub fn synonym_coverage(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for c in self.concepts.values() {
            let n = out.entry(c.vocabulary.clone()).or_insert(0);
            if !c.synonyms.is_empty() {
                *n += 1;
            }
        }
        out
    }
}

fn clean_synonyms<'a>(name: &str, synonyms: impl Iterator<Item = &'a String>) -> BTreeSet<String> {
    let name = normalize_surface(name);
    synonyms
        .map(|s| normalize_surface(s))
        .filter(|s| !s.is_empty() && *s != name)
        .collect()
}

/// Enriches every concept's synonym set.
///
/// * loaded synonyms are deduplicated under surface normalization;
/// * for every relation in `merge_relations` from `a` to `b`, the name and
///   synonyms of `b` (and of whatever `b` reaches the same way) become
///   synonyms of `a`, never the other way round;
/// * concepts of flat vocabularies get their code as a synonym so code and
///   label resolve to the same concept.
///
/// The result depends only on the loaded data, so expanding twice gives the
/// same store as expanding once.
pub fn expand_synonyms(mut store: ConceptStore, config: &ExpansionConfig) -> ConceptStore {
    let mut edges: BTreeMap<OmopId, BTreeSet<OmopId>> = BTreeMap::new();
    for rel in &store.relationships {
        if config.merge_relations.contains(&rel.relation) {
            edges.entry(rel.source_omop_id).or_default().insert(rel.target_omop_id);
        }
    }

    let own_forms = |id: OmopId, store: &ConceptStore| -> Vec<String> {
        let c = &store.concepts[&id];
        let mut forms: Vec<String> = store.loaded_synonyms[&id].iter().cloned().collect();
        if config.flat_vocabularies.contains(&c.vocabulary) {
            forms.push(normalize_surface(&c.code));
        }
        forms
    };

    let mut expanded: BTreeMap<OmopId, BTreeSet<String>> = BTreeMap::new();
    for &id in store.concepts.keys() {
        let mut forms = own_forms(id, &store);
        let mut seen = BTreeSet::from([id]);
        let mut queue: VecDeque<OmopId> = edges.get(&id).into_iter().flatten().copied().collect();
        while let Some(target) = queue.pop_front() {
            if !seen.insert(target) {
                continue;
            }
            forms.push(normalize_surface(&store.concepts[&target].name));
            forms.extend(own_forms(target, &store));
            queue.extend(edges.get(&target).into_iter().flatten().copied());
        }
        let name = &store.concepts[&id].name;
        expanded.insert(id, clean_synonyms(name, forms.iter()));
    }
    for (id, synonyms) in expanded {
        if let Some(c) = store.concepts.get_mut(&id) {
            c.synonyms = synonyms;
        }
    }
    store.rebuild_surfaces();
    store
}

#[derive(Debug, Deserialize)]
struct ConceptRow {
    omop_id: OmopId,
    code: String,
    name: String,
    vocabulary: String,
    domain: String,
    #[serde(default)]
    semantic_type: String,
    #[serde(default, deserialize_with = "standard_flag")]
    is_standard: bool,
}

#[derive(Debug, Deserialize)]
struct SynonymRow {
    omop_id: OmopId,
    synonym: String,
}

#[derive(Debug, Deserialize)]
struct RelationshipRow {
    source_omop_id: OmopId,
    target_omop_id: OmopId,
    relation: String,
}

fn standard_flag<'de, D: Deserializer<'de>>(de: D) -> Result<bool, D::Error> {
    let raw = String::deserialize(de)?;
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "s" | "yes" => Ok(true),
        "false" | "0" | "c" | "no" | "" => Ok(false),
        other => Err(serde::de::Error::custom(format!("invalid is_standard flag {other:?}"))),
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(u64, T)>, VocabError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| VocabError::Io { path: path.to_owned(), source })?;
    read_rows_from(&raw, &path.display().to_string())
}

fn read_rows_from<T: for<'de> Deserialize<'de>>(
    raw: &[u8],
    file: &str,
) -> Result<Vec<(u64, T)>, VocabError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(raw);
    let mut rows = Vec::new();
    for result in reader.deserialize::<T>() {
        match result {
            Ok(row) => rows.push((rows.len() as u64 + 2, row)),
            Err(err) => {
                let line = err.position().map(|p| p.line()).unwrap_or(rows.len() as u64 + 2);
                return Err(VocabError::MalformedRow {
                    file: file.to_owned(),
                    line,
                    reason: err.to_string(),
                });
            }
        }
    }
    Ok(rows)
}

/// Loads a closed store from the three CSV exports.
///
/// Row numbers in errors are physical line numbers (the header is line 1).
pub fn load_vocabulary(
    concept_file: &Path,
    synonym_file: &Path,
    relationship_file: &Path,
) -> Result<ConceptStore, VocabError> {
    let concept_rows: Vec<(u64, ConceptRow)> = read_rows(concept_file)?;
    let synonym_rows: Vec<(u64, SynonymRow)> = read_rows(synonym_file)?;
    let relationship_rows: Vec<(u64, RelationshipRow)> = read_rows(relationship_file)?;
    assemble(concept_rows, synonym_rows, relationship_rows)
}

/// Loads `concepts.csv`, `synonyms.csv` and `relationships.csv` from a
/// directory. The latter two may be absent.
pub fn load_kb_dir(dir: &Path) -> Result<ConceptStore, VocabError> {
    let concepts = read_rows(&dir.join("concepts.csv"))?;
    let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
    let synonyms = match optional("synonyms.csv") {
        Some(p) => read_rows(&p)?,
        None => Vec::new(),
    };
    let relationships = match optional("relationships.csv") {
        Some(p) => read_rows(&p)?,
        None => Vec::new(),
    };
    assemble(concepts, synonyms, relationships)
}

fn assemble(
    concept_rows: Vec<(u64, ConceptRow)>,
    synonym_rows: Vec<(u64, SynonymRow)>,
    relationship_rows: Vec<(u64, RelationshipRow)>,
) -> Result<ConceptStore, VocabError> {
    let mut concepts: BTreeMap<OmopId, Concept> = BTreeMap::new();
    let mut codes: HashMap<(String, String), u64> = HashMap::new();
    for (line, row) in concept_rows {
        if row.name.trim().is_empty() {
            return Err(VocabError::MalformedRow {
                file: "concepts".into(),
                line,
                reason: "empty name".into(),
            });
        }
        let key = (row.vocabulary.clone(), row.code.clone());
        if let Some(first) = codes.insert(key, line) {
            return Err(VocabError::DuplicateConcept {
                line,
                detail: format!(
                    "({}, {:?}) already defined at line {first}",
                    row.vocabulary, row.code
                ),
            });
        }
        if concepts.contains_key(&row.omop_id) {
            return Err(VocabError::DuplicateConcept {
                line,
                detail: format!("omop_id {} already defined", row.omop_id),
            });
        }
        let semantic_type = Some(row.semantic_type.trim().to_owned()).filter(|s| !s.is_empty());
        concepts.insert(
            row.omop_id,
            Concept {
                omop_id: row.omop_id,
                code: row.code,
                name: row.name,
                vocabulary: row.vocabulary,
                domain: row.domain,
                semantic_type,
                synonyms: BTreeSet::new(),
                parents: BTreeSet::new(),
                is_standard: row.is_standard,
            },
        );
    }
    for (line, row) in synonym_rows {
        let concept = concepts
            .get_mut(&row.omop_id)
            .ok_or(VocabError::DanglingReference { line, omop_id: row.omop_id })?;
        concept.synonyms.insert(row.synonym);
    }
    let mut relationships = Vec::with_capacity(relationship_rows.len());
    for (line, row) in relationship_rows {
        if row.relation.trim().is_empty() {
            return Err(VocabError::MalformedRow {
                file: "relationships".into(),
                line,
                reason: "empty relation".into(),
            });
        }
        for id in [row.source_omop_id, row.target_omop_id] {
            if !concepts.contains_key(&id) {
                return Err(VocabError::DanglingReference { line, omop_id: id });
            }
        }
        relationships.push(ConceptRelationship {
            source_omop_id: row.source_omop_id,
            target_omop_id: row.target_omop_id,
            relation: row.relation.trim().to_owned(),
        });
    }
    ConceptStore::from_parts(concepts.into_values().collect(), relationships)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows<T: for<'de> Deserialize<'de>>(csv: &str) -> Vec<(u64, T)> {
        read_rows_from(csv.as_bytes(), "test").unwrap()
    }

    const CONCEPTS: &str = "omop_id,code,name,vocabulary,domain,semantic_type,is_standard
100,22298006,Myocardial infarction,SNOMED,Condition,Clinical Finding,S
300,C07AG02,Carvedilol,ATC,Drug,ATC 5th,C
301,20352,carvedilol,RxNorm,Drug,Ingredient,S
302,202886,Coreg,RxNorm,Drug,Brand Name,S
400,pmol/L,picomole per liter,UCUM,Unit,,S
";

    fn store(synonyms: &str, relationships: &str) -> ConceptStore {
        assemble(rows(CONCEPTS), rows(synonyms), rows(relationships)).unwrap()
    }

    #[test]
    fn duplicate_code_names_the_row() {
        let csv = "omop_id,code,name,vocabulary,domain,semantic_type,is_standard
1,22298006,Myocardial infarction,SNOMED,Condition,,S
2,22298006,Heart attack,SNOMED,Condition,,S
";
        let err = assemble(rows(csv), vec![], vec![]).unwrap_err();
        match err {
            VocabError::DuplicateConcept { line, detail } => {
                assert_eq!(line, 3);
                assert!(detail.contains("22298006"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "omop_id,code,name,vocabulary,domain,semantic_type,is_standard
1,a,A,X,D,,S
oops,b,B,X,D,,S
";
        let err = read_rows_from::<ConceptRow>(csv.as_bytes(), "concepts.csv").unwrap_err();
        assert!(matches!(err, VocabError::MalformedRow { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn quoted_fields_with_doubled_quotes() {
        let csv = "omop_id,code,name,vocabulary,domain,semantic_type,is_standard
1,\"mm[Hg]\",\"millimeter \"\"mercury\"\" column, hg\",UCUM,Unit,,S
";
        let s = assemble(rows(csv), vec![], vec![]).unwrap();
        assert_eq!(s.get(1).unwrap().name, "millimeter \"mercury\" column, hg");
    }

    #[test]
    fn dangling_synonym_and_relationship() {
        let err = assemble(rows(CONCEPTS), rows("omop_id,synonym\n999,x\n"), vec![]).unwrap_err();
        assert!(matches!(err, VocabError::DanglingReference { omop_id: 999, line: 2 }));
        let err = assemble(
            rows(CONCEPTS),
            vec![],
            rows("source_omop_id,target_omop_id,relation\n100,5,Is a\n"),
        )
        .unwrap_err();
        assert!(matches!(err, VocabError::DanglingReference { omop_id: 5, .. }));
    }

    #[test]
    fn synonyms_are_normalized_and_exclude_the_name() {
        let s = store("omop_id,synonym\n100,MI\n100,mi\n100,MI \n100,myocardial  INFARCTION\n", "");
        let c = s.get(100).unwrap();
        assert_eq!(c.synonyms, BTreeSet::from(["mi".to_owned()]));
    }

    #[test]
    fn is_a_relationships_become_parents() {
        let s = store("", "source_omop_id,target_omop_id,relation\n302,301,Is a\n");
        assert_eq!(s.get(302).unwrap().parents, BTreeSet::from([301]));
    }

    #[test]
    fn maps_to_merges_target_forms_into_source_only() {
        let s = store(
            "omop_id,synonym\n301,Coreg\n",
            "source_omop_id,target_omop_id,relation\n300,301,Maps to\n",
        );
        let s = expand_synonyms(s, &ExpansionConfig::default());
        // target name "carvedilol" equals the source name and is dropped
        assert_eq!(s.get(300).unwrap().synonyms, BTreeSet::from(["coreg".to_owned()]));
        assert!(s.get(301).unwrap().synonyms.iter().all(|x| x != "carvedilol"));
    }

    #[test]
    fn trade_name_merges_brand_forms() {
        let s = store("", "source_omop_id,target_omop_id,relation\n301,302,Trade name\n");
        let s = expand_synonyms(s, &ExpansionConfig::default());
        assert!(s.get(301).unwrap().synonyms.contains("coreg"));
        assert!(s.get(302).unwrap().synonyms.is_empty());
    }

    #[test]
    fn flat_vocabulary_code_and_label_are_equivalent() {
        let s = expand_synonyms(store("", ""), &ExpansionConfig::default());
        let by_code: Vec<_> = s.find_exact("PMOL/L").iter().map(|c| c.omop_id).collect();
        let by_name: Vec<_> = s.find_exact("Picomole per Liter").iter().map(|c| c.omop_id).collect();
        assert_eq!(by_code, vec![400]);
        assert_eq!(by_name, vec![400]);
        assert_eq!(s.lookup_by_code("UCUM", "pmol/L").unwrap().omop_id, 400);
    }

    #[test]
    fn find_exact_spans_vocabularies_in_id_order() {
        let s = store("", "");
        let ids: Vec<_> = s.find_exact("carvedilol").iter().map(|c| c.omop_id).collect();
        assert_eq!(ids, vec![300, 301]);
        assert!(s.find_exact("zzz-unknown").is_empty());
    }

    #[test]
    fn get_and_lookup_misses_are_not_found() {
        let s = store("", "");
        assert!(matches!(s.get_concept(7), Err(VocabError::NotFound(_))));
        assert!(matches!(s.lookup_by_code("UCUM", "nope"), Err(VocabError::NotFound(_))));
    }
}
