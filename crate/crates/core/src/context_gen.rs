//! Narrative context passages written from a context subgraph, and the check
//! that every entity (with its image reference) made it into the text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::graph::{ContentGraph, ContextSubgraph, Domain, NodeId, Origin};
use crate::llm::{bindings, Decoding, ExchangeSpec, Gateway, LlmError, TemplateId};
use crate::text::{contains_phrase, split_sentences};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStyle {
    StoryNarrative,
    NewspaperArticle,
    ComedySketch,
    DiaryEntry,
    Poem,
    SongLyrics,
    DocumentaryScript,
    BlogPost,
    MotivationalSpeech,
    PromotionalArticle,
    MovieSceneDescription,
    SocialMediaPost,
}

impl ContextStyle {
    pub const ALL: [ContextStyle; 12] = [
        ContextStyle::StoryNarrative,
        ContextStyle::NewspaperArticle,
        ContextStyle::ComedySketch,
        ContextStyle::DiaryEntry,
        ContextStyle::Poem,
        ContextStyle::SongLyrics,
        ContextStyle::DocumentaryScript,
        ContextStyle::BlogPost,
        ContextStyle::MotivationalSpeech,
        ContextStyle::PromotionalArticle,
        ContextStyle::MovieSceneDescription,
        ContextStyle::SocialMediaPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextStyle::StoryNarrative => "Story/Narrative",
            ContextStyle::NewspaperArticle => "Newspaper Article",
            ContextStyle::ComedySketch => "Comedy Sketch",
            ContextStyle::DiaryEntry => "Diary Entry",
            ContextStyle::Poem => "Poem",
            ContextStyle::SongLyrics => "Song Lyrics",
            ContextStyle::DocumentaryScript => "Documentary Script",
            ContextStyle::BlogPost => "Blog Post",
            ContextStyle::MotivationalSpeech => "Motivational Speech",
            ContextStyle::PromotionalArticle => "Promotional Article",
            ContextStyle::MovieSceneDescription => "Movie Scene Description",
            ContextStyle::SocialMediaPost => "Social Media Post",
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

impl fmt::Display for ContextStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How images are referred to in prompts and generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLabeling {
    /// `(Image)`: a single image, or a video's frame set narrated as one.
    Single,
    /// `(Image N)`, 1-based.
    Numbered,
    /// `(Figure N)` / `(Table N)`: paper figures, named by the labels their
    /// edges carry.
    Figure,
}

impl ImageLabeling {
    pub fn for_graph(graph: &ContentGraph) -> Self {
        if graph.domain == Domain::SP {
            ImageLabeling::Figure
        } else if graph.domain == Domain::VF || graph.image_count == 1 {
            ImageLabeling::Single
        } else {
            ImageLabeling::Numbered
        }
    }

    pub fn tag(self, image_index: usize) -> String {
        match self {
            ImageLabeling::Single => "Image".into(),
            ImageLabeling::Numbered => format!("Image {}", image_index + 1),
            ImageLabeling::Figure => format!("Figure {}", image_index + 1),
        }
    }

    /// The phrase a sentence must contain to count as referring to the image.
    pub fn reference(self, image_index: usize) -> String {
        match self {
            ImageLabeling::Single => "image".into(),
            ImageLabeling::Numbered => format!("image {}", image_index + 1),
            ImageLabeling::Figure => format!("figure {}", image_index + 1),
        }
    }
}

/// Prompt-facing labels for the nodes of one graph.
///
/// Visual nodes read `"<name> (Image N)"`, falling back to the subscripted
/// display name when two visual nodes of one image share a name. Textual
/// nodes use their `"type (name)"` display name.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeler {
    pub labeling: ImageLabeling,
    labels: BTreeMap<NodeId, String>,
    stems: BTreeMap<NodeId, String>,
    image_tags: BTreeMap<usize, String>,
}

impl Labeler {
    pub fn new(graph: &ContentGraph) -> Self {
        Self::with_labeling(graph, ImageLabeling::for_graph(graph))
    }

    pub fn with_labeling(graph: &ContentGraph, labeling: ImageLabeling) -> Self {
        let mut labels = BTreeMap::new();
        let mut stems = BTreeMap::new();
        let mut image_tags: BTreeMap<usize, String> = (0..graph.image_count).map(|i| (i, labeling.tag(i))).collect();
        if labeling == ImageLabeling::Figure {
            let mut named = BTreeSet::new();
            for edge in &graph.edges {
                let Some(figure) = &edge.figure_label else { continue };
                for end in std::iter::once(&edge.subject_id).chain(edge.object_id.iter()) {
                    if let Some(i) = graph.node(end).and_then(|n| n.origin.image_index()) {
                        if named.insert(i) {
                            image_tags.insert(i, figure.clone());
                        }
                    }
                }
            }
        }
        for n in &graph.nodes {
            match n.origin {
                Origin::Visual { image_index } => {
                    let shared = graph
                        .visual_nodes()
                        .any(|m| m.id != n.id && m.name == n.name && m.origin == n.origin);
                    let stem = if shared { n.display_name.clone() } else { n.name.clone() };
                    let tag = image_tags.get(&image_index).cloned().unwrap_or_else(|| labeling.tag(image_index));
                    labels.insert(n.id.clone(), format!("{stem} ({tag})"));
                    stems.insert(n.id.clone(), stem);
                }
                Origin::Textual => {
                    labels.insert(n.id.clone(), n.display_name.clone());
                    stems.insert(n.id.clone(), n.name.clone());
                }
            }
        }
        Labeler { labeling, labels, stems, image_tags }
    }

    /// How image `i` is named in labels: `Image`, `Image 2`, `Figure 4`.
    pub fn image_tag(&self, image_index: usize) -> String {
        self.image_tags.get(&image_index).cloned().unwrap_or_else(|| self.labeling.tag(image_index))
    }

    /// The phrase free text uses to point at image `i`, lowercase.
    pub fn image_reference(&self, image_index: usize) -> String {
        match self.labeling {
            ImageLabeling::Figure => self.image_tag(image_index).to_lowercase(),
            other => other.reference(image_index),
        }
    }

    pub fn label<'a>(&'a self, id: &'a NodeId) -> &'a str {
        self.labels.get(id).map_or(id.as_str(), String::as_str)
    }

    /// The bare term expected in free text: the visual name, or the textual
    /// entity's proper name.
    pub fn stem<'a>(&'a self, id: &'a NodeId) -> &'a str {
        self.stems.get(id).map_or(id.as_str(), String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextViolation {
    MissingEntity { entity: String },
    MissingImageReference { entity: String, reference: String },
    AttributeLeak { entity: String, attribute: String },
}

/// Lists the entities a context fails to mention, and image-anchored entities
/// that never share a sentence with their image reference.
pub fn verify_context(text: &str, view: &ContextSubgraph, labeler: &Labeler) -> Vec<ContextViolation> {
    let sentences = split_sentences(text);
    let mut out = Vec::new();
    for n in &view.nodes {
        let stem = labeler.stem(&n.id);
        if !contains_phrase(text, stem) {
            out.push(ContextViolation::MissingEntity { entity: labeler.label(&n.id).into() });
            continue;
        }
        if let Some(image) = n.origin.image_index() {
            let reference = labeler.image_reference(image);
            let tied = sentences.iter().any(|s| contains_phrase(s, stem) && contains_phrase(s, &reference));
            if !tied {
                out.push(ContextViolation::MissingImageReference { entity: labeler.label(&n.id).into(), reference });
            }
        }
    }
    out
}

/// Withheld visual attributes that appear verbatim right before the entity
/// name ("black telephone pole").
pub fn attribute_leaks(text: &str, view: &ContextSubgraph, labeler: &Labeler) -> Vec<ContextViolation> {
    let mut out = Vec::new();
    for (id, attrs) in &view.withheld_attributes {
        let stem = labeler.stem(id);
        for a in attrs {
            if contains_phrase(text, &format!("{a} {stem}")) {
                out.push(ContextViolation::AttributeLeak { entity: labeler.label(id).into(), attribute: a.clone() });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context view has no relations to narrate")]
    NothingToNarrate,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("context still fails verification after regeneration: {0:?}")]
    Verification(Vec<ContextViolation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedContext {
    pub image_index: Option<usize>,
    pub style: ContextStyle,
    pub text: String,
    pub exchange_ids: Vec<String>,
    /// Violations of rejected drafts, for the log.
    pub rejected_drafts: Vec<Vec<ContextViolation>>,
}

/// The `entities` and `relations` prompt bindings for a view.
pub fn prompt_lists(view: &ContextSubgraph, labeler: &Labeler) -> (String, String) {
    let entities: Vec<&str> = view.nodes.iter().map(|n| labeler.label(&n.id)).collect();
    let relations: Vec<Value> = view
        .edges
        .iter()
        .filter_map(|edge| {
            let o = edge.object_id.as_ref()?;
            Some(json!({
                "subject": labeler.label(&edge.subject_id),
                "relation": edge.relation,
                "object": labeler.label(o),
            }))
        })
        .collect();
    let relations = relations.iter().map(Value::to_string).collect::<Vec<_>>().join(",\n");
    (Value::from(entities).to_string(), format!("[\n{relations}\n]"))
}

/// Writes one context passage for `view`, regenerating once if the draft
/// misses an entity, an image reference, or leaks a withheld attribute.
pub fn generate_context(
    view: &ContextSubgraph,
    style: ContextStyle,
    labeler: &Labeler,
    gateway: &Gateway,
    model_id: &str,
) -> Result<GeneratedContext, ContextError> {
    if !view.edges.iter().any(|edge| edge.object_id.is_some()) {
        return Err(ContextError::NothingToNarrate);
    }
    let (entities, relations) = prompt_lists(view, labeler);
    let b = bindings([("context_type", style.name().to_string()), ("entities", entities), ("relations", relations)]);
    let mut exchange_ids = Vec::new();
    let mut rejected = Vec::new();
    for _ in 0..2 {
        let (payload, ex) = gateway.exchange_payload(&ExchangeSpec::new(
            TemplateId::ContextGeneration,
            &b,
            model_id,
            Decoding::GENERATION,
        ))?;
        exchange_ids.push(ex.exchange_id);
        let text = payload.as_str().unwrap_or_default().to_string();
        let mut violations = verify_context(&text, view, labeler);
        violations.extend(attribute_leaks(&text, view, labeler));
        if violations.is_empty() {
            return Ok(GeneratedContext {
                image_index: view.image_index,
                style,
                text,
                exchange_ids,
                rejected_drafts: rejected,
            });
        }
        log::info!("context draft rejected: {violations:?}");
        rejected.push(violations);
    }
    Err(ContextError::Verification(rejected.pop().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::{extract_context_subgraph, EdgeAssignment, EntityNode, RelationEdge};
    use crate::llm::{RetryPolicy, ScriptedProvider, SyntheticProvider};
    use crate::rng::seeded;

    /// telephone pole (image 0, black) maintained by a company; a cord in image 1.
    fn pole_graph() -> ContentGraph {
        let mut graph = ContentGraph::new(Domain::NI, 2);
        graph.nodes.push(EntityNode::visual("0:1", "telephone pole", 0).with_attributes(["black"]));
        graph.nodes.push(EntityNode::visual("1:1", "cord", 1).with_attributes(["blue"]));
        graph.nodes.push(EntityNode::textual("t0", "company", "Veridian Grid Solutions"));
        graph.edges.push(RelationEdge::new(&NodeId::new("0:1"), &NodeId::new("t0"), "maintained by"));
        graph
    }

    fn pole_view(graph: &ContentGraph) -> ContextSubgraph {
        extract_context_subgraph(graph, 0, &EdgeAssignment::default()).unwrap()
    }

    #[test]
    fn labels() {
        let graph = pole_graph();
        let l = Labeler::new(&graph);
        assert_eq!(l.label(&NodeId::new("0:1")), "telephone pole (Image 1)");
        assert_eq!(l.label(&NodeId::new("t0")), "company (Veridian Grid Solutions)");
        assert_eq!(l.stem(&NodeId::new("t0")), "Veridian Grid Solutions");
        let mut single = graph.clone();
        single.image_count = 1;
        single.nodes.remove(1);
        assert_eq!(Labeler::new(&single).label(&NodeId::new("0:1")), "telephone pole (Image)");
    }

    #[test]
    fn figure_labels_come_from_edges() {
        let mut graph = ContentGraph::new(Domain::SP, 2);
        graph.nodes.push(EntityNode::visual("v0", "FLIC", 0));
        graph.nodes.push(EntityNode::visual("v1", "SLIC", 1));
        graph.nodes.push(EntityNode::textual("t0", "method", "superpixels"));
        let mut edge = RelationEdge::new(&NodeId::new("v0"), &NodeId::new("t0"), "is a");
        edge.figure_label = Some("Figure 4".into());
        edge.sentence_indices = Some(vec![0]);
        graph.edges.push(edge);
        let l = Labeler::new(&graph);
        assert_eq!(l.labeling, ImageLabeling::Figure);
        assert_eq!(l.label(&NodeId::new("v0")), "FLIC (Figure 4)");
        assert_eq!(l.image_reference(0), "figure 4");
        // no labelled edge: positional fallback
        assert_eq!(l.label(&NodeId::new("v1")), "SLIC (Figure 2)");
    }

    #[test]
    fn compliant_text_passes() {
        let graph = pole_graph();
        let text = "Crews were busy all week. The telephone pole shown in image 1 is maintained by \
                    Veridian Grid Solutions.";
        assert!(verify_context(text, &pole_view(&graph), &Labeler::new(&graph)).is_empty());
    }

    #[test]
    fn missing_entity_and_missing_reference() {
        let graph = pole_graph();
        let l = Labeler::new(&graph);
        let v = verify_context("The telephone pole shown in image 1 stands tall.", &pole_view(&graph), &l);
        assert_eq!(
            v,
            vec![ContextViolation::MissingEntity { entity: "company (Veridian Grid Solutions)".into() }]
        );
        let v = verify_context(
            "Image 1 is a street. The telephone pole is maintained by Veridian Grid Solutions.",
            &pole_view(&graph),
            &l,
        );
        assert_eq!(
            v,
            vec![ContextViolation::MissingImageReference {
                entity: "telephone pole (Image 1)".into(),
                reference: "image 1".into()
            }]
        );
    }

    #[test]
    fn leak_guard() {
        let graph = pole_graph();
        let text = "The black telephone pole shown in image 1 is maintained by Veridian Grid Solutions.";
        assert_eq!(
            attribute_leaks(text, &pole_view(&graph), &Labeler::new(&graph)),
            vec![ContextViolation::AttributeLeak { entity: "telephone pole (Image 1)".into(), attribute: "black".into() }]
        );
    }

    #[test]
    fn empty_view_fails_before_any_call() {
        let p = Arc::new(ScriptedProvider::texts(["x"]));
        let gw = Gateway::new(p.clone(), RetryPolicy::immediate(1), 1);
        let mut graph = pole_graph();
        graph.edges.clear();
        let err = generate_context(&pole_view(&graph), ContextStyle::Poem, &Labeler::new(&graph), &gw, "m").unwrap_err();
        assert!(matches!(err, ContextError::NothingToNarrate));
        assert!(p.calls().is_empty());
    }

    #[test]
    fn one_regeneration_then_failure() {
        let good = "The telephone pole shown in image 1 is maintained by Veridian Grid Solutions.";
        let p = Arc::new(ScriptedProvider::texts(["A pole.", good]));
        let gw = Gateway::new(p.clone(), RetryPolicy::immediate(1), 1);
        let graph = pole_graph();
        let ctx = generate_context(&pole_view(&graph), ContextStyle::Poem, &Labeler::new(&graph), &gw, "m").unwrap();
        assert_eq!(ctx.text, good);
        assert_eq!(ctx.rejected_drafts.len(), 1);
        assert!(p.calls()[0].prompt.contains("You are writing a Poem."));

        let p = Arc::new(ScriptedProvider::texts(["A pole.", "Still a pole.", good]));
        let gw = Gateway::new(p, RetryPolicy::immediate(1), 1);
        let err = generate_context(&pole_view(&graph), ContextStyle::Poem, &Labeler::new(&graph), &gw, "m").unwrap_err();
        assert!(matches!(err, ContextError::Verification(_)));
    }

    #[test]
    fn synthetic_context_verifies() {
        let gw = Gateway::new(Arc::new(SyntheticProvider), RetryPolicy::immediate(1), 1);
        let graph = pole_graph();
        let ctx = generate_context(&pole_view(&graph), ContextStyle::BlogPost, &Labeler::new(&graph), &gw, "m").unwrap();
        assert!(ctx.text.contains("telephone pole shown in image 1"));
    }

    #[test]
    fn style_draws_cover_all_twelve_evenly() {
        // 1200 draws, 100 expected per style; binomial sd = sqrt(1200 * 1/12 * 11/12) ~ 9.57
        let mut rng = seeded(11);
        let mut counts: BTreeMap<ContextStyle, usize> = BTreeMap::new();
        for _ in 0..1200 {
            *counts.entry(ContextStyle::random(&mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 12);
        let sd = (1200.0_f64 * (1.0 / 12.0) * (11.0 / 12.0)).sqrt();
        for (style, c) in counts {
            assert!((c as f64 - 100.0).abs() <= 3.0 * sd, "{style}: {c}");
        }
    }
}
