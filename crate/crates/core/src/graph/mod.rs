//! Multimodal content graph: entities anchored to images or introduced as
//! text, joined by free-text relation triples.
//!
//! The JSON form of [`ContentGraph`] (top-level `nodes`, `edges`,
//! `image_count`, `domain`) is the interchange format between pipeline stages.

mod chain;
mod context;
mod merge;
mod unique;

pub use chain::{
    enumerate_chains, sample_chain, select_answer, AnswerKind, ChainConfig, ChainNode,
    ChainSubgraph, HopBounds, DEFAULT_ORACLE_LIMIT, MAX_SAMPLING_ATTEMPTS,
};
pub use context::{extract_context_subgraph, extract_full_context, ContextSubgraph, EdgeAssignment};
pub use merge::merge_scene_graphs;
pub use unique::{filter_unique_entities, Discriminator, FilteredScene, RelationDirection};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("no scene graphs to merge")]
    EmptyInput,
    #[error("too many images in one sample: {0} (at most 6)")]
    TooManyImages(usize),
    #[error("relation in image {image} references unknown object `{object}`")]
    DanglingRelation { image: usize, object: String },
    #[error("duplicate object id `{0}` in one scene graph")]
    DuplicateObject(String),
    #[error("hop count {hops} outside {min}..={max} for domain {domain}")]
    HopOutOfBounds { hops: usize, min: usize, max: usize, domain: Domain },
    #[error("graph has {nodes} nodes, above the enumeration limit of {limit}")]
    OracleLimit { nodes: usize, limit: usize },
    #[error("image index {index} out of range for {count} images")]
    ImageOutOfRange { index: usize, count: usize },
    #[error("cross-image edge {0} has no image assignment")]
    UnassignedEdge(usize),
    #[error("terminal node `{0}` has no attributes to answer with")]
    NoAttribute(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Source domain of a sample: natural images, video frames or scientific papers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    NI,
    VF,
    SP,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::NI, Domain::VF, Domain::SP];

    /// Inclusive hop bounds for chains sampled in this domain.
    pub fn hop_bounds(self) -> HopBounds {
        match self {
            Domain::NI | Domain::VF => HopBounds { min: 1, max: 5 },
            Domain::SP => HopBounds { min: 1, max: 4 },
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::NI => "NI",
            Domain::VF => "VF",
            Domain::SP => "SP",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NI" => Ok(Domain::NI),
            "VF" => Ok(Domain::VF),
            "SP" => Ok(Domain::SP),
            other => Err(format!("unknown domain `{other}` (expected NI, VF or SP)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Visual { image_index: usize },
    Textual,
}

impl Origin {
    pub fn image_index(self) -> Option<usize> {
        match self {
            Origin::Visual { image_index } => Some(image_index),
            Origin::Textual => None,
        }
    }

    pub fn is_visual(self) -> bool {
        matches!(self, Origin::Visual { .. })
    }
}

/// Where an LLM-generated node or edge came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub exchange_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: NodeId,
    pub name: String,
    pub display_name: String,
    pub origin: Origin,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl EntityNode {
    pub fn visual(id: impl Into<String>, name: impl Into<String>, image_index: usize) -> Self {
        let name = name.into();
        EntityNode {
            id: NodeId::new(id),
            display_name: name.clone(),
            name,
            origin: Origin::Visual { image_index },
            attributes: Vec::new(),
            type_tag: None,
            provenance: None,
        }
    }

    /// A textual entity in `type (name)` form.
    pub fn textual(id: impl Into<String>, type_tag: &str, name: &str) -> Self {
        EntityNode {
            id: NodeId::new(id),
            name: name.to_string(),
            display_name: format!("{type_tag} ({name})"),
            origin: Origin::Textual,
            attributes: Vec::new(),
            type_tag: Some(type_tag.to_string()),
            provenance: None,
        }
    }

    pub fn with_attributes<I, S>(mut self, attrs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = attrs.into_iter().map(Into::into).collect();
        self
    }

    pub fn is_visual(&self) -> bool {
        self.origin.is_visual()
    }

    /// Strings that identify this entity in free text: the display name, and
    /// for typed textual entities the parenthetical proper name.
    pub fn mention_terms(&self) -> Vec<String> {
        let mut terms = vec![self.display_name.clone()];
        if self.name != self.display_name {
            terms.push(self.name.clone());
        }
        terms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub subject_id: NodeId,
    /// Absent for solo actions (video captions such as "a dog runs").
    pub object_id: Option<NodeId>,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_tag: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub figure_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl RelationEdge {
    pub fn new(subject: &NodeId, object: &NodeId, relation: impl Into<String>) -> Self {
        RelationEdge {
            subject_id: subject.clone(),
            object_id: Some(object.clone()),
            relation: relation.into(),
            image_tag: None,
            figure_label: None,
            sentence_indices: None,
            provenance: None,
        }
    }

    pub fn solo(subject: &NodeId, relation: impl Into<String>) -> Self {
        RelationEdge {
            object_id: None,
            ..RelationEdge::new(subject, subject, relation)
        }
    }

    pub fn with_image_tag(mut self, image: usize) -> Self {
        self.image_tag = Some(image);
        self
    }

    /// The endpoint opposite `node`, if the edge touches `node` and has two endpoints.
    pub fn other_end(&self, node: &NodeId) -> Option<&NodeId> {
        let object = self.object_id.as_ref()?;
        if &self.subject_id == node {
            Some(object)
        } else if object == node {
            Some(&self.subject_id)
        } else {
            None
        }
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.subject_id == node || self.object_id.as_ref() == Some(node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentGraph {
    pub nodes: Vec<EntityNode>,
    pub edges: Vec<RelationEdge>,
    pub image_count: usize,
    pub domain: Domain,
}

impl ContentGraph {
    pub fn new(domain: Domain, image_count: usize) -> Self {
        ContentGraph { nodes: Vec::new(), edges: Vec::new(), image_count, domain }
    }

    pub fn node(&self, id: &NodeId) -> Option<&EntityNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    pub fn node_index(&self) -> BTreeMap<&NodeId, &EntityNode> {
        self.nodes.iter().map(|n| (&n.id, n)).collect()
    }

    pub fn visual_nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.iter().filter(|n| n.is_visual())
    }

    pub fn textual_nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.iter().filter(|n| !n.is_visual())
    }

    /// Images a node belongs to: its own image for visual nodes, the images of
    /// adjacent visual nodes for textual ones.
    pub fn attached_images(&self, id: &NodeId) -> BTreeSet<usize> {
        let index = self.node_index();
        match index.get(id).map(|n| n.origin) {
            Some(Origin::Visual { image_index }) => BTreeSet::from([image_index]),
            Some(Origin::Textual) => self
                .edges
                .iter()
                .filter_map(|edge| edge.other_end(id))
                .filter_map(|other| index.get(other).and_then(|n| n.origin.image_index()))
                .collect(),
            None => BTreeSet::new(),
        }
    }

    /// Checks referential integrity, id/display-name uniqueness, image ranges
    /// and the per-domain image-count bound. `require_textual` additionally
    /// demands at least one textual node (post-augmentation graphs).
    pub fn validate(&self, require_textual: bool) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(&node.id) {
                return Err(GraphError::Invalid(format!("duplicate node id `{}`", node.id)));
            }
            if !names.insert(&node.display_name) {
                return Err(GraphError::Invalid(format!(
                    "duplicate display name `{}`",
                    node.display_name
                )));
            }
            match node.origin {
                Origin::Visual { image_index } => {
                    if image_index >= self.image_count {
                        return Err(GraphError::ImageOutOfRange {
                            index: image_index,
                            count: self.image_count,
                        });
                    }
                    if node.type_tag.is_some() {
                        return Err(GraphError::Invalid(format!(
                            "visual node `{}` carries a type tag",
                            node.id
                        )));
                    }
                }
                Origin::Textual => {}
            }
        }
        for (i, edge) in self.edges.iter().enumerate() {
            let endpoints = std::iter::once(&edge.subject_id).chain(edge.object_id.iter());
            for end in endpoints {
                if !ids.contains(end) {
                    return Err(GraphError::Invalid(format!(
                        "edge {i} references unknown node `{end}`"
                    )));
                }
            }
            if edge.figure_label.is_some() && edge.sentence_indices.is_none() {
                return Err(GraphError::Invalid(format!(
                    "edge {i} has a figure label but no sentence indices"
                )));
            }
        }
        if self.domain == Domain::NI && !(1..=6).contains(&self.image_count) {
            return Err(GraphError::Invalid(format!(
                "natural-image sample has {} images (expected 1 to 6)",
                self.image_count
            )));
        }
        if self.visual_nodes().next().is_none() {
            return Err(GraphError::Invalid("graph has no visual node".into()));
        }
        if require_textual && self.textual_nodes().next().is_none() {
            return Err(GraphError::Invalid("graph has no textual node".into()));
        }
        Ok(())
    }

    /// Next unused id with the given prefix (`t0`, `t1`, ...).
    pub fn fresh_id(&self, prefix: &str) -> NodeId {
        let taken: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        (0..)
            .map(|k| format!("{prefix}{k}"))
            .find(|c| !taken.contains(c.as_str()))
            .map(NodeId)
            .expect("unbounded id space")
    }
}

/// A single image's scene graph before merging: objects with attributes and
/// directed relations between them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<SceneRelation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl SceneGraph {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Reports the first object id referenced by a relation but not present.
    pub fn check_references(&self, image: usize) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return Err(GraphError::DuplicateObject(o.id.clone()));
            }
        }
        for rel in &self.relations {
            for end in [&rel.subject, &rel.object] {
                if !ids.contains(end.as_str()) {
                    return Err(GraphError::DanglingRelation { image, object: end.clone() });
                }
            }
        }
        Ok(())
    }
}
