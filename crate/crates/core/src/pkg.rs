//! Personal knowledge graphs: a user's chronologically ordered liked and
//! disliked entities, with JSON-LD persistence and the compact prompt form.
//!
//! Graph values are immutable; every mutating operation hands back a new
//! graph, so a snapshot taken at one point of a conversation stays valid while
//! the user's graph keeps growing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Cutoff that admits every order index.
pub const NO_CUTOFF: u64 = u64::MAX;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PkgError {
    #[error("triple subject `{subject}` does not match graph owner `{user_id}`")]
    SubjectMismatch { user_id: String, subject: String },
    #[error("JSON-LD error at `{path}`: {message}")]
    JsonLd { path: String, message: String },
}

fn jsonld_err(path: impl Into<String>, message: impl Into<String>) -> PkgError {
    PkgError::JsonLd {
        path: path.into(),
        message: message.into(),
    }
}

/// A catalog entity: a movie, a recipe, an ingredient.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub iri: String,
    pub label: String,
    /// schema.org class name, e.g. `Movie` or `Recipe`.
    pub entity_type: String,
}

impl EntityRef {
    pub fn new(
        iri: impl Into<String>,
        label: impl Into<String>,
        entity_type: impl Into<String>,
    ) -> Self {
        Self {
            iri: iri.into(),
            label: label.into(),
            entity_type: entity_type.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Liked,
    Disliked,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::Liked, Relation::Disliked];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Liked => "liked",
            Relation::Disliked => "disliked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "liked" => Some(Relation::Liked),
            "disliked" => Some(Relation::Disliked),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub subject: String,
    pub relation: Relation,
    pub object: EntityRef,
    /// Chronological position of the interaction that produced the triple.
    pub order_index: u64,
}

impl PreferenceTriple {
    pub fn new(
        subject: impl Into<String>,
        relation: Relation,
        object: EntityRef,
        order_index: u64,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation,
            object,
            order_index,
        }
    }
}

/// Outcome of [`PersonalKnowledgeGraph::add_preference`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    Added,
    /// The `(relation, iri)` pair was already present; the graph is unchanged.
    Redundant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonalKnowledgeGraph {
    user_id: String,
    triples: Vec<PreferenceTriple>,
}

impl PersonalKnowledgeGraph {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            triples: Vec::new(),
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn triples(&self) -> &[PreferenceTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn add_preference(&self, triple: PreferenceTriple) -> Result<(Self, Insertion), PkgError> {
        let mut next = self.clone();
        let outcome = next.insert(triple)?;
        Ok((next, outcome))
    }

    /// In-place variant used while replaying a history; callers that hand
    /// graphs out should go through [`add_preference`](Self::add_preference).
    pub(crate) fn insert(&mut self, triple: PreferenceTriple) -> Result<Insertion, PkgError> {
        if triple.subject != self.user_id {
            return Err(PkgError::SubjectMismatch {
                user_id: self.user_id.clone(),
                subject: triple.subject,
            });
        }
        if self.has_edge(triple.relation, &triple.object.iri) {
            return Ok(Insertion::Redundant);
        }
        // Upper bound keeps equal order indices in insertion order.
        let pos = self
            .triples
            .partition_point(|t| t.order_index <= triple.order_index);
        self.triples.insert(pos, triple);
        Ok(Insertion::Added)
    }

    pub fn has_edge(&self, relation: Relation, iri: &str) -> bool {
        self.triples
            .iter()
            .any(|t| t.relation == relation && t.object.iri == iri)
    }

    /// True when the entity appears under either relation.
    pub fn contains_entity(&self, entity: &EntityRef) -> bool {
        self.contains_iri(&entity.iri)
    }

    pub fn contains_iri(&self, iri: &str) -> bool {
        self.triples.iter().any(|t| t.object.iri == iri)
    }

    /// A copy keeping only the triples whose entity passes `keep`.
    pub fn filtered(&self, keep: impl Fn(&EntityRef) -> bool) -> Self {
        Self {
            user_id: self.user_id.clone(),
            triples: self
                .triples
                .iter()
                .filter(|t| keep(&t.object))
                .cloned()
                .collect(),
        }
    }

    /// Triples of one entity type with `order_index <= cutoff`, order kept.
    pub fn query_subpkg(&self, domain: &str, cutoff: u64) -> SubPkg {
        SubPkg {
            user_id: self.user_id.clone(),
            domain: domain.to_string(),
            cutoff,
            triples: self
                .triples
                .iter()
                .filter(|t| t.object.entity_type == domain && t.order_index <= cutoff)
                .cloned()
                .collect(),
        }
    }

    /// The most recent relation recorded for each entity, in order of that
    /// latest triple.
    pub fn latest_relations(&self) -> Vec<(EntityRef, Relation, u64)> {
        latest_relations(&self.triples)
    }

    pub fn to_jsonld(&self) -> Value {
        jsonld::to_document(self)
    }

    pub fn from_jsonld(doc: &Value) -> Result<Self, PkgError> {
        jsonld::from_document(doc)
    }
}

fn latest_relations(triples: &[PreferenceTriple]) -> Vec<(EntityRef, Relation, u64)> {
    let mut latest: BTreeMap<&str, (usize, &PreferenceTriple)> = BTreeMap::new();
    for (pos, t) in triples.iter().enumerate() {
        latest.insert(&t.object.iri, (pos, t));
    }
    let mut out: Vec<_> = latest.into_values().collect();
    out.sort_by_key(|(pos, _)| *pos);
    out.into_iter()
        .map(|(_, t)| (t.object.clone(), t.relation, t.order_index))
        .collect()
}

/// A domain-filtered, time-truncated slice of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPkg {
    pub user_id: String,
    pub domain: String,
    pub cutoff: u64,
    pub triples: Vec<PreferenceTriple>,
}

impl SubPkg {
    pub fn empty(user_id: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            domain: domain.into(),
            cutoff: NO_CUTOFF,
            triples: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains_iri(&self, iri: &str) -> bool {
        self.triples.iter().any(|t| t.object.iri == iri)
    }

    pub fn labels(&self, relation: Relation) -> Vec<&str> {
        self.triples
            .iter()
            .filter(|t| t.relation == relation)
            .map(|t| t.object.label.as_str())
            .collect()
    }

    pub fn latest_relations(&self) -> Vec<(EntityRef, Relation, u64)> {
        latest_relations(&self.triples)
    }

    /// Compact JSON embedded in prompts, e.g.
    /// `{"32": {"liked": ["Zodiac (2007)"]}}`.
    ///
    /// Separators are `", "` and `": "`; a relation key is omitted when it
    /// has no labels.
    pub fn to_prompt_json(&self) -> String {
        let mut out = String::from("{");
        out.push_str(&json_string(&self.user_id));
        out.push_str(": {");
        let mut first_key = true;
        for relation in Relation::ALL {
            let labels = self.labels(relation);
            if labels.is_empty() {
                continue;
            }
            if !first_key {
                out.push_str(", ");
            }
            first_key = false;
            out.push_str(&json_string(relation.as_str()));
            out.push_str(": [");
            for (i, label) in labels.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&json_string(label));
            }
            out.push(']');
        }
        out.push_str("}}");
        out
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

mod jsonld {
    use super::*;

    pub const PKG_VOCAB: &str = "https://w3id.org/fedpkg/vocab#";
    pub const SCHEMA: &str = "https://schema.org/";
    const USER_PREFIX: &str = "urn:fedpkg:user:";

    pub fn to_document(pkg: &PersonalKnowledgeGraph) -> Value {
        let mut context = Map::new();
        context.insert("schema".into(), json!(SCHEMA));
        context.insert("pkg".into(), json!(PKG_VOCAB));
        for relation in Relation::ALL {
            context.insert(
                relation.as_str().into(),
                json!({"@id": format!("pkg:{}", relation.as_str()), "@type": "@id"}),
            );
        }
        context.insert("identifier".into(), json!("schema:identifier"));
        context.insert("name".into(), json!("schema:name"));
        context.insert("orderIndex".into(), json!("pkg:orderIndex"));
        context.insert("sequence".into(), json!("pkg:sequence"));
        context.insert("Person".into(), json!("schema:Person"));

        let mut entity_nodes: BTreeMap<&str, &EntityRef> = BTreeMap::new();
        let mut edges: BTreeMap<Relation, Vec<Value>> = BTreeMap::new();
        for (seq, t) in pkg.triples.iter().enumerate() {
            entity_nodes.entry(&t.object.iri).or_insert(&t.object);
            context
                .entry(t.object.entity_type.clone())
                .or_insert_with(|| json!(format!("schema:{}", t.object.entity_type)));
            edges.entry(t.relation).or_default().push(json!({
                "@id": t.object.iri,
                "@annotation": {"orderIndex": t.order_index, "sequence": seq},
            }));
        }

        let mut user = Map::new();
        user.insert("@id".into(), json!(format!("{USER_PREFIX}{}", pkg.user_id)));
        user.insert("@type".into(), json!("Person"));
        user.insert("identifier".into(), json!(pkg.user_id));
        for (relation, list) in edges {
            user.insert(relation.as_str().into(), Value::Array(list));
        }

        let mut graph = vec![Value::Object(user)];
        graph.extend(
            entity_nodes
                .values()
                .map(|e| json!({"@id": e.iri, "@type": e.entity_type, "name": e.label})),
        );

        json!({"@context": Value::Object(context), "@graph": graph})
    }

    fn str_field<'a>(
        obj: &'a Map<String, Value>,
        key: &str,
        path: &str,
    ) -> Result<&'a str, PkgError> {
        obj.get(key)
            .ok_or_else(|| jsonld_err(format!("{path}.{key}"), "missing"))?
            .as_str()
            .ok_or_else(|| jsonld_err(format!("{path}.{key}"), "expected a string"))
    }

    fn u64_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u64, PkgError> {
        obj.get(key)
            .ok_or_else(|| jsonld_err(format!("{path}.{key}"), "missing"))?
            .as_u64()
            .ok_or_else(|| jsonld_err(format!("{path}.{key}"), "expected a non-negative integer"))
    }

    pub fn from_document(doc: &Value) -> Result<PersonalKnowledgeGraph, PkgError> {
        let root = doc
            .as_object()
            .ok_or_else(|| jsonld_err("$", "expected an object"))?;
        let context = root
            .get("@context")
            .ok_or_else(|| jsonld_err("$.@context", "missing context"))?
            .as_object()
            .ok_or_else(|| jsonld_err("$.@context", "expected an object"))?;
        for relation in Relation::ALL {
            if !context.contains_key(relation.as_str()) {
                return Err(jsonld_err(
                    format!("$.@context.{}", relation.as_str()),
                    "relation is not declared in the context",
                ));
            }
        }
        let graph = root
            .get("@graph")
            .ok_or_else(|| jsonld_err("$.@graph", "missing"))?
            .as_array()
            .ok_or_else(|| jsonld_err("$.@graph", "expected an array"))?;

        let mut user: Option<(usize, &Map<String, Value>)> = None;
        let mut entities: BTreeMap<String, EntityRef> = BTreeMap::new();
        for (i, node) in graph.iter().enumerate() {
            let path = format!("$.@graph[{i}]");
            let obj = node
                .as_object()
                .ok_or_else(|| jsonld_err(&path, "expected a node object"))?;
            let ty = str_field(obj, "@type", &path)?;
            if ty == "Person" {
                if user.is_some() {
                    return Err(jsonld_err(&path, "more than one user node"));
                }
                user = Some((i, obj));
                continue;
            }
            if !context.contains_key(ty) {
                return Err(jsonld_err(
                    format!("{path}.@type"),
                    format!("type `{ty}` not declared in the context"),
                ));
            }
            let iri = str_field(obj, "@id", &path)?;
            let label = str_field(obj, "name", &path)?;
            if iri.is_empty() || label.is_empty() {
                return Err(jsonld_err(&path, "entity iri and name must be non-empty"));
            }
            let entity = EntityRef::new(iri, label, ty);
            if entities.insert(iri.to_string(), entity).is_some() {
                return Err(jsonld_err(
                    format!("{path}.@id"),
                    format!("duplicate entity `{iri}`"),
                ));
            }
        }

        let (user_pos, user) = user.ok_or_else(|| jsonld_err("$.@graph", "no user node"))?;
        let user_path = format!("$.@graph[{user_pos}]");
        let user_id = str_field(user, "identifier", &user_path)?;

        let mut sequenced: Vec<(u64, PreferenceTriple)> = Vec::new();
        for (key, value) in user {
            if matches!(key.as_str(), "@id" | "@type" | "identifier") {
                continue;
            }
            let relation = Relation::parse(key).ok_or_else(|| {
                jsonld_err(
                    format!("{user_path}.{key}"),
                    format!("unknown relation `{key}`"),
                )
            })?;
            let edges = value.as_array().ok_or_else(|| {
                jsonld_err(format!("{user_path}.{key}"), "expected an array of edges")
            })?;
            for (j, edge) in edges.iter().enumerate() {
                let path = format!("{user_path}.{key}[{j}]");
                let edge = edge
                    .as_object()
                    .ok_or_else(|| jsonld_err(&path, "expected an edge object"))?;
                let iri = str_field(edge, "@id", &path)?;
                let annotation = edge
                    .get("@annotation")
                    .and_then(Value::as_object)
                    .ok_or_else(|| {
                        jsonld_err(format!("{path}.@annotation"), "missing edge annotation")
                    })?;
                let apath = format!("{path}.@annotation");
                let order_index = u64_field(annotation, "orderIndex", &apath)?;
                let seq = u64_field(annotation, "sequence", &apath)?;
                let object = entities
                    .get(iri)
                    .ok_or_else(|| {
                        jsonld_err(format!("{path}.@id"), format!("no entity node for `{iri}`"))
                    })?
                    .clone();
                sequenced.push((
                    seq,
                    PreferenceTriple::new(user_id, relation, object, order_index),
                ));
            }
        }
        sequenced.sort_by_key(|(seq, _)| *seq);

        let mut pkg = PersonalKnowledgeGraph::new(user_id);
        for (seq, triple) in sequenced {
            let (relation, iri) = (triple.relation, triple.object.iri.clone());
            if pkg.insert(triple)? == Insertion::Redundant {
                return Err(jsonld_err(
                    format!("{user_path}.{relation}"),
                    format!("duplicate edge to `{iri}` (sequence {seq})"),
                ));
            }
        }
        Ok(pkg)
    }
}

pub use jsonld::{PKG_VOCAB, SCHEMA};
