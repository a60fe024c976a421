//! The simulated knowledge world: entities joined by predicate edges, with
//! fact snippets for text retrieval, numeric measures for scene questions,
//! and a distractor pool for robustness runs.
//!
//! Fixtures are line-delimited JSON, one record per line, tagged by `kind`:
//!
//! ```text
//! {"kind":"predicate","id":"P106","label":"occupation","family":"occupation","listed":"whitelist"}
//! {"kind":"entity","id":"Q1","name":"Tom Hardy","class":"human","snippets":["..."]}
//! {"kind":"edge","subject":"Q1","predicate":"P106","value":"Q2"}
//! {"kind":"abstract_value","id":"Q5"}
//! {"kind":"bias_prone_type","class":"country"}
//! {"kind":"distractor","topic":"wingspan","snippet":"..."}
//! {"kind":"famous_fact","question":"...","answer":"..."}
//! ```
//!
//! Records may appear in any order; references are resolved after the whole
//! file is read. Blank lines and lines starting with `#` are skipped.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

const DEMO_FIXTURE: &str = include_str!("../fixtures/demo_world.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Listing {
    Whitelist,
    Blacklist,
    #[default]
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub id: String,
    #[serde(default)]
    pub label: String,
    pub family: String,
    #[serde(default)]
    pub listed: Listing,
}

impl Predicate {
    pub fn label(&self) -> &str {
        if self.label.is_empty() {
            &self.id
        } else {
            &self.label
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(rename = "class")]
    pub class_name: String,
    /// Source collection for scene entities (e.g. `birds`); empty for graph nodes.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub domain: String,
    /// What a visual match reports: identity, not attribute facts.
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub snippets: Vec<String>,
    #[serde(default)]
    pub measures: Vec<Measure>,
    /// Outgoing `(predicate_id, value_entity_id)` edges, filled from edge records.
    #[serde(skip)]
    pub attributes: Vec<(String, String)>,
}

impl Entity {
    pub fn new(id: impl Into<String>, class_name: impl Into<String>) -> Self {
        let id = id.into();
        Entity {
            name: id.clone(),
            id,
            class_name: class_name.into(),
            domain: String::new(),
            description: String::new(),
            snippets: Vec::new(),
            measures: Vec::new(),
            attributes: Vec::new(),
        }
    }

    pub fn display_name(&self) -> &str {
        if self.name.is_empty() {
            &self.id
        } else {
            &self.name
        }
    }

    pub fn measure(&self, name: &str) -> Option<&Measure> {
        self.measures.iter().find(|m| m.name == name)
    }

    pub fn has_attribute(&self, predicate: &str, value: &str) -> bool {
        self.attributes
            .iter()
            .any(|(p, v)| p == predicate && v == value)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Predicate(Predicate),
    Entity(Entity),
    Edge {
        subject: String,
        predicate: String,
        value: String,
    },
    AbstractValue {
        id: String,
    },
    BiasProneType {
        class: String,
    },
    Distractor {
        topic: String,
        snippet: String,
    },
    FamousFact {
        question: String,
        answer: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("reading fixture: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown entity `{0}`")]
pub struct UnknownEntity(pub String);

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, Default)]
pub struct WorldFixture {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
    predicates: BTreeMap<String, Predicate>,
    pub abstract_values: BTreeSet<String>,
    pub bias_prone_types: BTreeSet<String>,
    pub distractor_pool: BTreeMap<String, Vec<String>>,
    pub famous_facts: Vec<(String, String)>,
    /// For each entity, the subjects of edges whose value is that entity
    /// (one entry per edge).
    incoming: Vec<Vec<usize>>,
    edge_count: usize,
}

impl WorldFixture {
    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn require(&self, id: &str) -> Result<&Entity, UnknownEntity> {
        self.entity(id).ok_or_else(|| UnknownEntity(id.to_string()))
    }

    pub fn predicate(&self, id: &str) -> Option<&Predicate> {
        self.predicates.get(id)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.predicates.values()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Undirected first-order neighborhood, excluding the entity itself.
    pub fn neighbors(&self, entity_id: &str) -> Result<BTreeSet<String>, UnknownEntity> {
        let &idx = self
            .index
            .get(entity_id)
            .ok_or_else(|| UnknownEntity(entity_id.to_string()))?;
        let mut out: BTreeSet<String> = self.entities[idx]
            .attributes
            .iter()
            .map(|(_, v)| v.clone())
            .collect();
        out.extend(self.incoming[idx].iter().map(|&s| self.entities[s].id.clone()));
        out.remove(entity_id);
        Ok(out)
    }

    /// Values reachable along one outgoing edge, in edge order.
    pub fn successors(&self, entity_id: &str) -> Result<Vec<&str>, UnknownEntity> {
        Ok(self
            .require(entity_id)?
            .attributes
            .iter()
            .map(|(_, v)| v.as_str())
            .collect())
    }

    /// Number of edges whose value is `entity_id` (in-reference count).
    pub fn out_degree(&self, entity_id: &str) -> Result<usize, UnknownEntity> {
        let &idx = self
            .index
            .get(entity_id)
            .ok_or_else(|| UnknownEntity(entity_id.to_string()))?;
        Ok(self.incoming[idx].len())
    }

    /// A predicate family is blacklisted when any predicate in it is.
    pub fn family_blacklisted(&self, family: &str) -> bool {
        self.predicates
            .values()
            .any(|p| p.family == family && p.listed == Listing::Blacklist)
    }

    pub fn entities_of_class(&self, class_name: &str) -> Vec<&Entity> {
        self.entities
            .iter()
            .filter(|e| e.class_name == class_name)
            .collect()
    }

    pub fn class_names(&self) -> BTreeSet<&str> {
        self.entities.iter().map(|e| e.class_name.as_str()).collect()
    }

    /// Serializes back to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |r: Record| lines.push(serde_json::to_string(&r).expect("record serializes"));
        for p in self.predicates.values() {
            push(Record::Predicate(p.clone()));
        }
        for e in &self.entities {
            push(Record::Entity(e.clone()));
        }
        for e in &self.entities {
            for (p, v) in &e.attributes {
                push(Record::Edge {
                    subject: e.id.clone(),
                    predicate: p.clone(),
                    value: v.clone(),
                });
            }
        }
        for id in &self.abstract_values {
            push(Record::AbstractValue { id: id.clone() });
        }
        for class in &self.bias_prone_types {
            push(Record::BiasProneType {
                class: class.clone(),
            });
        }
        for (topic, snippets) in &self.distractor_pool {
            for s in snippets {
                push(Record::Distractor {
                    topic: topic.clone(),
                    snippet: s.clone(),
                });
            }
        }
        for (q, a) in &self.famous_facts {
            push(Record::FamousFact {
                question: q.clone(),
                answer: a.clone(),
            });
        }
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// Accumulates records and checks referential integrity on [`build`](Self::build).
#[derive(Debug, Default, Clone)]
pub struct WorldBuilder {
    entities: Vec<Entity>,
    predicates: Vec<Predicate>,
    edges: Vec<(String, String, String)>,
    abstract_values: Vec<String>,
    bias_prone_types: BTreeSet<String>,
    distractors: Vec<(String, String)>,
    famous_facts: Vec<(String, String)>,
}

impl WorldBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, entity: Entity) -> &mut Self {
        self.entities.push(entity);
        self
    }

    pub fn predicate(
        &mut self,
        id: impl Into<String>,
        family: impl Into<String>,
        listed: Listing,
    ) -> &mut Self {
        self.predicates.push(Predicate {
            id: id.into(),
            label: String::new(),
            family: family.into(),
            listed,
        });
        self
    }

    pub fn predicate_record(&mut self, predicate: Predicate) -> &mut Self {
        self.predicates.push(predicate);
        self
    }

    pub fn edge(
        &mut self,
        subject: impl Into<String>,
        predicate: impl Into<String>,
        value: impl Into<String>,
    ) -> &mut Self {
        self.edges
            .push((subject.into(), predicate.into(), value.into()));
        self
    }

    pub fn abstract_value(&mut self, id: impl Into<String>) -> &mut Self {
        self.abstract_values.push(id.into());
        self
    }

    pub fn bias_prone_type(&mut self, class: impl Into<String>) -> &mut Self {
        self.bias_prone_types.insert(class.into());
        self
    }

    pub fn distractor(&mut self, topic: impl Into<String>, snippet: impl Into<String>) -> &mut Self {
        self.distractors.push((topic.into(), snippet.into()));
        self
    }

    pub fn famous_fact(&mut self, question: impl Into<String>, answer: impl Into<String>) -> &mut Self {
        self.famous_facts.push((question.into(), answer.into()));
        self
    }

    fn add_record(&mut self, record: Record) {
        match record {
            Record::Predicate(p) => {
                self.predicates.push(p);
            }
            Record::Entity(e) => {
                self.entities.push(e);
            }
            Record::Edge {
                subject,
                predicate,
                value,
            } => {
                self.edge(subject, predicate, value);
            }
            Record::AbstractValue { id } => {
                self.abstract_value(id);
            }
            Record::BiasProneType { class } => {
                self.bias_prone_type(class);
            }
            Record::Distractor { topic, snippet } => {
                self.distractor(topic, snippet);
            }
            Record::FamousFact { question, answer } => {
                self.famous_fact(question, answer);
            }
        }
    }

    pub fn build(self) -> Result<WorldFixture, LoadError> {
        let mut predicates = BTreeMap::new();
        for p in self.predicates {
            if p.family.trim().is_empty() {
                return Err(LoadError::Parse {
                    line: 0,
                    message: format!("predicate `{}` has an empty family", p.id),
                });
            }
            if predicates.contains_key(&p.id) {
                return Err(LoadError::DuplicateId(p.id));
            }
            predicates.insert(p.id.clone(), p);
        }

        let mut index = HashMap::with_capacity(self.entities.len());
        let mut entities = self.entities;
        for (i, e) in entities.iter_mut().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(LoadError::DuplicateId(e.id.clone()));
            }
            if e.name.is_empty() {
                e.name = e.id.clone();
            }
        }

        let mut incoming = vec![Vec::new(); entities.len()];
        let edge_count = self.edges.len();
        for (subject, predicate, value) in self.edges {
            let &s = index
                .get(&subject)
                .ok_or_else(|| LoadError::DanglingReference(format!("edge subject `{subject}`")))?;
            let &v = index
                .get(&value)
                .ok_or_else(|| LoadError::DanglingReference(format!("edge value `{value}`")))?;
            if !predicates.contains_key(&predicate) {
                return Err(LoadError::DanglingReference(format!(
                    "edge predicate `{predicate}`"
                )));
            }
            incoming[v].push(s);
            entities[s].attributes.push((predicate, value));
        }

        let mut abstract_values = BTreeSet::new();
        for id in self.abstract_values {
            if !index.contains_key(&id) {
                return Err(LoadError::DanglingReference(format!("abstract value `{id}`")));
            }
            abstract_values.insert(id);
        }

        let mut distractor_pool: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (topic, snippet) in self.distractors {
            distractor_pool.entry(topic).or_default().push(snippet);
        }

        Ok(WorldFixture {
            entities,
            index,
            predicates,
            abstract_values,
            bias_prone_types: self.bias_prone_types,
            distractor_pool,
            famous_facts: self.famous_facts,
            incoming,
            edge_count,
        })
    }
}

pub fn parse_world(text: &str) -> Result<WorldFixture, LoadError> {
    let mut builder = WorldBuilder::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| LoadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        builder.add_record(record);
    }
    builder.build()
}

pub fn load_world(path: impl AsRef<Path>) -> Result<WorldFixture, LoadError> {
    let text = std::fs::read_to_string(path)?;
    parse_world(&text)
}

/// The bundled demo world: a twelve-person pivot for constraint chains and
/// five fine-grained domains with numeric measures for mosaic questions.
pub fn demo_world() -> WorldFixture {
    parse_world(DEMO_FIXTURE).expect("bundled demo fixture is valid")
}

pub fn demo_world_jsonl() -> &'static str {
    DEMO_FIXTURE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> WorldBuilder {
        let mut b = WorldBuilder::new();
        b.predicate("p", "fam", Listing::Whitelist)
            .predicate("q", "other", Listing::Neutral)
            .entity(Entity::new("a", "thing"))
            .entity(Entity::new("b", "thing"))
            .entity(Entity::new("c", "thing"));
        b
    }

    #[test]
    fn self_loop_is_not_a_neighbor() {
        let mut b = tri();
        b.edge("a", "p", "a").edge("a", "p", "b").edge("c", "q", "a");
        let w = b.build().unwrap();
        let n = w.neighbors("a").unwrap();
        assert_eq!(n, ["b", "c"].iter().map(|s| s.to_string()).collect());
        assert_eq!(w.neighbors("b").unwrap().len(), 1);
    }

    #[test]
    fn in_degree_counts_each_edge() {
        let mut b = tri();
        b.edge("a", "p", "b").edge("a", "q", "b");
        let w = b.build().unwrap();
        assert_eq!(w.out_degree("b").unwrap(), 2);
        assert_eq!(w.out_degree("c").unwrap(), 0);
        assert_eq!(w.neighbors("c").unwrap().len(), 0);
        assert!(w.out_degree("zzz").is_err());
    }

    #[test]
    fn hub_with_350_references() {
        let mut b = WorldBuilder::new();
        b.predicate("p", "fam", Listing::Whitelist)
            .entity(Entity::new("hub", "thing"));
        for i in 0..350 {
            b.entity(Entity::new(format!("e{i}"), "thing"))
                .edge(format!("e{i}"), "p", "hub");
        }
        let w = b.build().unwrap();
        assert_eq!(w.out_degree("hub").unwrap(), 350);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let text = r#"{"kind":"predicate","id":"p","family":"f"}
{"kind":"entity","id":"a","class":"x"}
{"kind":"edge","subject":"a","predicate":"p","value":"ghost"}"#;
        assert!(matches!(
            parse_world(text),
            Err(LoadError::DanglingReference(_))
        ));
    }

    #[test]
    fn duplicate_entity_is_rejected() {
        let text = r#"{"kind":"entity","id":"a","class":"x"}
{"kind":"entity","id":"a","class":"y"}"#;
        assert!(matches!(parse_world(text), Err(LoadError::DuplicateId(_))));
    }

    #[test]
    fn empty_fixture_is_valid() {
        let w = parse_world("").unwrap();
        assert!(w.entities().is_empty());
    }

    #[test]
    fn garbage_line_reports_line_number() {
        let err = parse_world("\n{\"kind\":\"entity\",\"id\":\"a\",\"class\":\"x\"}\nnot json").unwrap_err();
        assert!(matches!(err, LoadError::Parse { line: 3, .. }));
    }

    #[test]
    fn jsonl_round_trip_preserves_structure() {
        let w = demo_world();
        let again = parse_world(&w.to_jsonl()).unwrap();
        assert_eq!(again.entities(), w.entities());
        assert_eq!(again.edge_count(), w.edge_count());
        assert_eq!(again.abstract_values, w.abstract_values);
        assert_eq!(again.distractor_pool, w.distractor_pool);
    }
}
