//! Grows a merged visual graph with LLM-generated textual entities and the
//! relations among them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{ContentGraph, EntityNode, NodeId, Provenance, RelationEdge};
use crate::llm::{
    bindings, decode, Decoding, ExchangeSpec, Gateway, LlmError, LlmExchange, TemplateId, TriplePayload,
};
use crate::text::split_typed_name;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("image {0} has no captions")]
    MissingCaptions(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub model_id: String,
    /// Visual nodes per image that receive textual neighbors.
    pub max_nodes_per_image: usize,
    /// Category prompts per selected node, drawn uniformly from this range.
    pub min_categories: usize,
    pub max_categories: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { model_id: "stub".into(), max_nodes_per_image: 4, min_categories: 1, max_categories: 2 }
    }
}

/// Captions fed to the text-node prompts for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageCaptions {
    pub caption: String,
    pub object_captions: BTreeMap<NodeId, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AugmentOutcome {
    NodeAdded { node_id: NodeId },
    EdgeAdded { subject: String, relation: String, object: String },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentEvent {
    pub template_id: TemplateId,
    pub exchange_id: Option<String>,
    #[serde(flatten)]
    pub outcome: AugmentOutcome,
}

fn noun_phrase(node: &EntityNode) -> String {
    if node.attributes.is_empty() {
        format!("a {}", node.name)
    } else {
        format!("a {} {}", node.attributes.join(" "), node.name)
    }
}

/// Captions composed from the graph itself: each object contributes
/// "a <attributes> <name> <relation> a <neighbor>" phrases.
pub fn scene_captions(graph: &ContentGraph) -> Vec<ImageCaptions> {
    let index = graph.node_index();
    let mut out = vec![ImageCaptions::default(); graph.image_count];
    for node in graph.visual_nodes() {
        let image = node.origin.image_index().expect("visual");
        let phrases: Vec<String> = graph
            .edges
            .iter()
            .filter(|edge| edge.subject_id == node.id)
            .map(|edge| match edge.object_id.as_ref().and_then(|o| index.get(o)) {
                Some(obj) => format!("{} {} {}", noun_phrase(node), edge.relation, noun_phrase(obj)),
                None => format!("{} {}", noun_phrase(node), edge.relation),
            })
            .collect();
        let own = if phrases.is_empty() { noun_phrase(node) } else { phrases.join("; ") };
        out[image].object_captions.insert(node.id.clone(), own);
    }
    for (image, caps) in out.iter_mut().enumerate() {
        let mut parts: Vec<String> = Vec::new();
        for n in graph.visual_nodes().filter(|n| n.origin.image_index() == Some(image)) {
            let c = &caps.object_captions[&n.id];
            if !parts.iter().any(|p| p.contains(c.as_str())) {
                parts.push(c.clone());
            }
        }
        caps.caption = capitalize_sentence(&parts.join(", "));
    }
    out
}

fn capitalize_sentence(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => format!("{}{}.", c.to_uppercase(), chars.as_str()),
        None => String::new(),
    }
}

/// Checks a node-creating triple: the subject must be the queried entity and
/// the object must have the `type (name)` shape. Returns `(type, name)`.
pub fn validate_node_triple<'a>(triple: &'a TriplePayload, queried: &str) -> Result<(&'a str, &'a str), String> {
    if triple.subject.trim() != queried {
        return Err(format!("subject `{}` is not the queried entity `{queried}`", triple.subject));
    }
    if triple.relation.trim().is_empty() {
        return Err("empty relation".into());
    }
    let (ty, name) = split_typed_name(&triple.object)
        .ok_or_else(|| format!("object `{}` is not in `type (name)` form", triple.object))?;
    if ty.eq_ignore_ascii_case("image") {
        return Err(format!("object `{}` uses the reserved image tag", triple.object));
    }
    Ok((ty, name))
}

struct NodeJob<'a> {
    anchor: &'a EntityNode,
    template: TemplateId,
}

fn provenance(ex: &LlmExchange) -> Provenance {
    Provenance { template_id: ex.template_id.to_string(), exchange_id: ex.exchange_id.clone() }
}

/// Adds textual entities next to a random subset of visual nodes.
///
/// Selection (which nodes, which categories) uses `rng`; the prompts then run
/// in parallel and their results are applied in selection order, so the output
/// depends only on the inputs, the seed and the provider.
pub fn generate_text_nodes<R: Rng + ?Sized>(
    graph: &ContentGraph,
    captions: &[ImageCaptions],
    gateway: &Gateway,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(ContentGraph, Vec<AugmentEvent>), AugmentError> {
    let mut jobs = Vec::new();
    for image in 0..graph.image_count {
        let candidates: Vec<&EntityNode> =
            graph.visual_nodes().filter(|n| n.origin.image_index() == Some(image)).collect();
        let take = config.max_nodes_per_image.min(candidates.len());
        let chosen: Vec<&EntityNode> = candidates.choose_multiple(rng, take).copied().collect();
        for anchor in chosen {
            let hi = config.max_categories.clamp(1, TemplateId::TEXT_NODE.len());
            let lo = config.min_categories.clamp(1, hi);
            let k = rng.random_range(lo..=hi);
            for template in TemplateId::TEXT_NODE.choose_multiple(rng, k) {
                jobs.push(NodeJob { anchor, template: *template });
            }
        }
    }

    if let Some(job) = jobs.iter().find(|j| captions.get(j.anchor.origin.image_index().expect("visual")).is_none()) {
        return Err(AugmentError::MissingCaptions(job.anchor.origin.image_index().expect("visual")));
    }
    let results: Vec<Result<LlmExchange, LlmError>> = jobs
        .par_iter()
        .map(|job| {
            let caps = &captions[job.anchor.origin.image_index().expect("visual")];
            let object_caption =
                caps.object_captions.get(&job.anchor.id).cloned().unwrap_or_else(|| noun_phrase(job.anchor));
            let b = bindings([
                ("object", job.anchor.name.clone()),
                ("image_caption", caps.caption.clone()),
                ("object_caption", object_caption),
            ]);
            gateway.exchange(&ExchangeSpec::new(job.template, &b, &config.model_id, Decoding::GENERATION))
        })
        .collect();

    let mut out = graph.clone();
    let mut events = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        let ex = result?;
        let reject = |reason: String| AugmentEvent {
            template_id: job.template,
            exchange_id: Some(ex.exchange_id.clone()),
            outcome: AugmentOutcome::Rejected { reason },
        };
        let Some(payload) = ex.parsed_payload.value() else {
            events.push(reject("unparseable completion".into()));
            continue;
        };
        let triple: TriplePayload = match decode(payload) {
            Ok(t) => t,
            Err(e) => {
                events.push(reject(e.reason));
                continue;
            }
        };
        let (ty, name) = match validate_node_triple(&triple, &job.anchor.name) {
            Ok(parts) => parts,
            Err(reason) => {
                log::info!("dropping text-node triple: {reason}");
                events.push(reject(reason));
                continue;
            }
        };
        let mut node = EntityNode::textual(out.fresh_id("t").0, ty, name);
        if out.nodes.iter().any(|n| n.display_name == node.display_name) {
            events.push(reject(format!("entity `{}` already exists", node.display_name)));
            continue;
        }
        node.provenance = Some(provenance(&ex));
        let mut edge = RelationEdge::new(&job.anchor.id, &node.id, triple.relation.trim());
        edge.provenance = Some(provenance(&ex));
        events.push(AugmentEvent {
            template_id: job.template,
            exchange_id: Some(ex.exchange_id.clone()),
            outcome: AugmentOutcome::NodeAdded { node_id: node.id.clone() },
        });
        out.nodes.push(node);
        out.edges.push(edge);
    }
    Ok((out, events))
}

/// Asks for relations among the textual entities and adds the valid ones.
/// Triples must name two distinct listed entities; repeats are ignored.
pub fn generate_text_edges(
    graph: &ContentGraph,
    gateway: &Gateway,
    model_id: &str,
) -> Result<(ContentGraph, Vec<AugmentEvent>), AugmentError> {
    let template = TemplateId::EdgeGeneration;
    let by_label: BTreeMap<&str, &NodeId> = graph.textual_nodes().map(|n| (n.display_name.as_str(), &n.id)).collect();
    if by_label.len() < 2 {
        return Ok((graph.clone(), Vec::new()));
    }
    let labels: Vec<&str> = graph.textual_nodes().map(|n| n.display_name.as_str()).collect();
    let b = bindings([("list_of_entities", Value::from(labels).to_string())]);
    let (payload, ex) = gateway.exchange_payload(&ExchangeSpec::new(template, &b, model_id, Decoding::GENERATION))?;

    let mut out = graph.clone();
    let mut seen: BTreeSet<(NodeId, Option<NodeId>, String)> =
        out.edges.iter().map(|edge| (edge.subject_id.clone(), edge.object_id.clone(), edge.relation.clone())).collect();
    let mut events = Vec::new();
    let event = |outcome| AugmentEvent { template_id: template, exchange_id: Some(ex.exchange_id.clone()), outcome };
    for item in payload.as_array().into_iter().flatten() {
        let triple: TriplePayload = match decode(item) {
            Ok(t) => t,
            Err(e) => {
                events.push(event(AugmentOutcome::Rejected { reason: e.reason }));
                continue;
            }
        };
        let (s, o) = (by_label.get(triple.subject.trim()), by_label.get(triple.object.trim()));
        let (Some(s), Some(o)) = (s, o) else {
            events.push(event(AugmentOutcome::Rejected {
                reason: format!("`{}` / `{}` not both in the entity list", triple.subject, triple.object),
            }));
            continue;
        };
        if s == o {
            events.push(event(AugmentOutcome::Rejected { reason: "self relation".into() }));
            continue;
        }
        let relation = triple.relation.trim().to_string();
        if relation.is_empty() {
            events.push(event(AugmentOutcome::Rejected { reason: "empty relation".into() }));
            continue;
        }
        if !seen.insert(((*s).clone(), Some((*o).clone()), relation.clone())) {
            continue;
        }
        let mut edge = RelationEdge::new(s, o, relation.clone());
        edge.provenance = Some(provenance(&ex));
        out.edges.push(edge);
        events.push(event(AugmentOutcome::EdgeAdded {
            subject: triple.subject.trim().into(),
            relation,
            object: triple.object.trim().into(),
        }));
    }
    Ok((out, events))
}
