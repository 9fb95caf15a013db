//! Fact triplets, the closed relation set, and the knowledge-base index.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Category,
    Comparative,
    HasA,
    IsA,
    HasProperty,
    CapableOf,
    Desires,
    RelatedTo,
    AtLocation,
    PartOf,
    ReceivesAction,
    UsedFor,
    CreatedBy,
}

pub const NUM_RELATIONS: usize = 13;

impl Relation {
    pub const ALL: [Relation; NUM_RELATIONS] = [
        Relation::Category,
        Relation::Comparative,
        Relation::HasA,
        Relation::IsA,
        Relation::HasProperty,
        Relation::CapableOf,
        Relation::Desires,
        Relation::RelatedTo,
        Relation::AtLocation,
        Relation::PartOf,
        Relation::ReceivesAction,
        Relation::UsedFor,
        Relation::CreatedBy,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Relation> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Category => "Category",
            Relation::Comparative => "Comparative",
            Relation::HasA => "HasA",
            Relation::IsA => "IsA",
            Relation::HasProperty => "HasProperty",
            Relation::CapableOf => "CapableOf",
            Relation::Desires => "Desires",
            Relation::RelatedTo => "RelatedTo",
            Relation::AtLocation => "AtLocation",
            Relation::PartOf => "PartOf",
            Relation::ReceivesAction => "ReceivesAction",
            Relation::UsedFor => "UsedFor",
            Relation::CreatedBy => "CreatedBy",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown relation {name:?}; valid relations: {}", valid_relation_list())]
pub struct UnknownRelation {
    pub name: String,
}

fn valid_relation_list() -> String {
    Relation::ALL
        .iter()
        .map(|r| r.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Case-insensitive match against the 13 relation names.
pub fn parse_relation(name: &str) -> Result<Relation, UnknownRelation> {
    let trimmed = name.trim();
    Relation::ALL
        .iter()
        .copied()
        .find(|r| r.name().eq_ignore_ascii_case(trimmed))
        .ok_or_else(|| UnknownRelation {
            name: name.to_string(),
        })
}

impl FromStr for Relation {
    type Err = UnknownRelation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_relation(s)
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_relation(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("entity {0:?} is empty after normalization")]
pub struct EmptyEntity(pub String);

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_entity(s: &str) -> Result<String, EmptyEntity> {
    let out = s
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if out.is_empty() {
        return Err(EmptyEntity(s.to_string()));
    }
    Ok(out)
}

pub type FactId = u64;

/// One `(x, r, y)` triplet. `x` is the visual-concept side, `y` the
/// attribute/phrase side. Both are stored normalized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: FactId,
    pub x: String,
    pub r: Relation,
    pub y: String,
    #[serde(rename = "kb", default = "unknown_source")]
    pub source: String,
}

fn unknown_source() -> String {
    "unknown".to_string()
}

impl Fact {
    pub fn new(
        id: FactId,
        x: &str,
        r: Relation,
        y: &str,
        source: impl Into<String>,
    ) -> Result<Self, EmptyEntity> {
        Ok(Self {
            id,
            x: normalize_entity(x)?,
            r,
            y: normalize_entity(y)?,
            source: source.into(),
        })
    }
}

/// Normalized `(x, y)` pair of a fact.
pub fn entities_of(f: &Fact) -> (String, String) {
    // Facts built through `Fact::new` or `load_kb` are already canonical;
    // re-normalizing keeps hand-built facts honest too.
    let norm = |s: &str| normalize_entity(s).unwrap_or_default();
    (norm(&f.x), norm(&f.y))
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: {source}")]
    Relation {
        line: usize,
        #[source]
        source: UnknownRelation,
    },
    #[error("line {line}: {source}")]
    Entity {
        line: usize,
        #[source]
        source: EmptyEntity,
    },
    #[error("duplicate fact id {id} on lines {first_line} and {line}")]
    DuplicateId {
        id: FactId,
        first_line: usize,
        line: usize,
    },
}

#[derive(Deserialize)]
struct RawFact {
    id: FactId,
    x: String,
    r: String,
    y: String,
    #[serde(default = "unknown_source")]
    kb: String,
}

/// Immutable fact table with an entity -> fact-id index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    facts: BTreeMap<FactId, Fact>,
    entity_index: BTreeMap<String, Vec<FactId>>,
}

impl KnowledgeBase {
    pub fn from_facts(facts: impl IntoIterator<Item = Fact>) -> Result<Self, KbError> {
        let mut kb = Self::default();
        for (i, f) in facts.into_iter().enumerate() {
            kb.insert(f, i + 1, &mut BTreeMap::new())?;
        }
        Ok(kb)
    }

    fn insert(
        &mut self,
        fact: Fact,
        line: usize,
        lines: &mut BTreeMap<FactId, usize>,
    ) -> Result<(), KbError> {
        if self.facts.contains_key(&fact.id) {
            return Err(KbError::DuplicateId {
                id: fact.id,
                first_line: lines.get(&fact.id).copied().unwrap_or(0),
                line,
            });
        }
        lines.insert(fact.id, line);
        let (x, y) = entities_of(&fact);
        self.entity_index.entry(x.clone()).or_default().push(fact.id);
        if y != x {
            self.entity_index.entry(y).or_default().push(fact.id);
        }
        self.facts.insert(fact.id, fact);
        Ok(())
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, KbError> {
        let mut kb = Self::default();
        let mut lines = BTreeMap::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawFact = serde_json::from_str(&line).map_err(|e| KbError::Json {
                line: line_no,
                message: e.to_string(),
            })?;
            let r = parse_relation(&raw.r).map_err(|source| KbError::Relation {
                line: line_no,
                source,
            })?;
            let fact = Fact::new(raw.id, &raw.x, r, &raw.y, raw.kb).map_err(|source| {
                KbError::Entity {
                    line: line_no,
                    source,
                }
            })?;
            kb.insert(fact, line_no, &mut lines)?;
        }
        Ok(kb)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn get(&self, id: FactId) -> Option<&Fact> {
        self.facts.get(&id)
    }

    pub fn contains(&self, id: FactId) -> bool {
        self.facts.contains_key(&id)
    }

    /// Facts in ascending id order.
    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.values()
    }

    pub fn facts_with_entity(&self, entity: &str) -> &[FactId] {
        self.entity_index.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entity_index.keys().map(String::as_str)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for f in self.facts.values() {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    KnowledgeBase::from_reader(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"id": 1, "x": "Orange", "r": "IsA", "y": "Citric", "kb": "conceptnet"}
{"id": 2, "x": "orange ", "r": "HasProperty", "y": "sweet"}
{"id": 3, "x": "Laptop", "r": "UsedFor", "y": "Data   Processing", "kb": "dbpedia"}
"#;

    #[test]
    fn relation_codes_follow_listed_order() {
        assert_eq!(parse_relation("IsA").unwrap(), Relation::IsA);
        assert_eq!(Relation::IsA.code(), 3);
        assert_eq!(parse_relation("usedfor").unwrap(), Relation::UsedFor);
        for (i, r) in Relation::ALL.iter().enumerate() {
            assert_eq!(r.code(), i);
            assert_eq!(parse_relation(r.name()).unwrap(), *r);
            assert_eq!(Relation::from_code(i), Some(*r));
        }
        assert_eq!(Relation::from_code(13), None);
    }

    #[test]
    fn unknown_relation_lists_valid_names() {
        let err = parse_relation("Near").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Near") && msg.contains("CreatedBy") && msg.contains("IsA"));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_entity("Orange ").unwrap(), "orange");
        assert_eq!(normalize_entity("Data   Processing").unwrap(), "data processing");
        assert!(normalize_entity("  ").is_err());
    }

    #[test]
    fn load_fixture_builds_index() {
        let kb = KnowledgeBase::from_reader(FIXTURE.as_bytes()).unwrap();
        assert_eq!(kb.len(), 3);
        // orange, citric, sweet, laptop, data processing
        assert_eq!(kb.entity_count(), 5);
        assert_eq!(kb.facts_with_entity("orange"), &[1, 2]);
        assert_eq!(kb.facts_with_entity("citric"), &[1]);
        assert_eq!(kb.get(2).unwrap().source, "unknown");
        assert_eq!(kb.get(3).unwrap().y, "data processing");
    }

    #[test]
    fn index_entries_point_at_facts_containing_the_entity() {
        let kb = KnowledgeBase::from_reader(FIXTURE.as_bytes()).unwrap();
        for e in kb.entities() {
            for &id in kb.facts_with_entity(e) {
                let (x, y) = entities_of(kb.get(id).unwrap());
                assert!(x == e || y == e);
            }
        }
    }

    #[test]
    fn duplicate_id_reports_both_lines() {
        let text = "{\"id\": 7, \"x\": \"a\", \"r\": \"IsA\", \"y\": \"b\"}\n\
                    {\"id\": 8, \"x\": \"a\", \"r\": \"IsA\", \"y\": \"c\"}\n\
                    {\"id\": 7, \"x\": \"d\", \"r\": \"IsA\", \"y\": \"e\"}\n";
        match KnowledgeBase::from_reader(text.as_bytes()).unwrap_err() {
            KbError::DuplicateId {
                id,
                first_line,
                line,
            } => assert_eq!((id, first_line, line), (7, 1, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_relation_and_json_report_line() {
        let text = "{\"id\": 1, \"x\": \"a\", \"r\": \"IsA\", \"y\": \"b\"}\n\
                    {\"id\": 2, \"x\": \"a\", \"r\": \"Near\", \"y\": \"b\"}\n";
        assert!(matches!(
            KnowledgeBase::from_reader(text.as_bytes()),
            Err(KbError::Relation { line: 2, .. })
        ));
        assert!(matches!(
            KnowledgeBase::from_reader("{\"id\": 1,\n".as_bytes()),
            Err(KbError::Json { line: 1, .. })
        ));
        assert!(matches!(
            KnowledgeBase::from_reader("{\"id\": 1, \"x\": \" \", \"r\": \"IsA\", \"y\": \"b\"}".as_bytes()),
            Err(KbError::Entity { line: 1, .. })
        ));
    }

    #[test]
    fn entities_of_normalizes() {
        let f = Fact {
            id: 0,
            x: "Orange".into(),
            r: Relation::IsA,
            y: "Citric".into(),
            source: "x".into(),
        };
        assert_eq!(entities_of(&f), ("orange".to_string(), "citric".to_string()));
        let same = Fact::new(1, "Cat", Relation::IsA, " cat ", "t").unwrap();
        let (x, y) = entities_of(&same);
        assert_eq!(x, y);
        let a = Fact::new(2, "data  processing", Relation::IsA, "b", "t").unwrap();
        let b = Fact::new(3, " Data processing", Relation::IsA, "b", "t").unwrap();
        assert_eq!(entities_of(&a).0, entities_of(&b).0);
    }

    #[test]
    fn self_pair_indexed_once() {
        let kb = KnowledgeBase::from_facts([Fact::new(4, "cat", Relation::IsA, "Cat", "t").unwrap()])
            .unwrap();
        assert_eq!(kb.facts_with_entity("cat"), &[4]);
    }

    #[test]
    fn jsonl_round_trip_is_identical() {
        let kb = KnowledgeBase::from_reader(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        kb.write_jsonl(&mut buf).unwrap();
        let again = KnowledgeBase::from_reader(buf.as_slice()).unwrap();
        assert_eq!(kb, again);
        let again_again = KnowledgeBase::from_reader(FIXTURE.as_bytes()).unwrap();
        assert_eq!(kb, again_again);
    }
}
