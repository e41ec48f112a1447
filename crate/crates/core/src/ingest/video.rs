//! Captioned videos: one frame per caption chosen by embedding similarity,
//! and the caption list turned into one coreference-resolved graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embed::{cosine, EmbedError};
use crate::graph::{ContentGraph, Domain, EntityNode, NodeId, RelationEdge};
use crate::llm::{bindings, decode, Decoding, ExchangeSpec, Gateway, LlmError, RawBundle, TemplateId};

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("caption {caption} ({start_s}s-{end_s}s) has no candidate frame in range")]
    NoCandidate { caption: usize, start_s: f64, end_s: f64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("caption {0} ends before it starts")]
    BadRange(usize),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("caption bundle rejected after retry: {0}")]
    Bundle(BundleViolation),
    #[error("no captions")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCaption {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Position in the given caption order, even when time ranges overlap.
    pub scene_index: usize,
}

impl TimedCaption {
    /// Captions from `(text, start, end)` triples, indexed in order.
    pub fn ordered<I, S>(items: I) -> Vec<TimedCaption>
    where
        I: IntoIterator<Item = (S, f64, f64)>,
        S: Into<String>,
    {
        items
            .into_iter()
            .enumerate()
            .map(|(i, (text, start_s, end_s))| TimedCaption { text: text.into(), start_s, end_s, scene_index: i })
            .collect()
    }
}

/// Timestamps sampled at `fps` inside `[start_s, end_s]`, starting at `start_s`.
pub fn candidate_timestamps(start_s: f64, end_s: f64, fps: f64) -> Vec<f64> {
    if fps.is_nan() || fps <= 0.0 || end_s < start_s {
        return Vec::new();
    }
    let n = ((end_s - start_s) * fps).floor() as usize;
    (0..=n).map(|k| start_s + k as f64 / fps).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFrame {
    pub timestamp_s: f64,
    pub path: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameChoice {
    pub caption: usize,
    pub frame: usize,
    pub timestamp_s: f64,
    pub similarity: f64,
}

/// For each caption, the frame inside its time window whose embedding is
/// most similar to the caption's; ties go to the earliest frame.
pub fn select_frames(
    frames: &[CandidateFrame],
    captions: &[TimedCaption],
    caption_embeddings: &[Vec<f32>],
) -> Result<Vec<FrameChoice>, VideoError> {
    let mut out = Vec::with_capacity(captions.len());
    for (ci, (cap, emb)) in captions.iter().zip(caption_embeddings).enumerate() {
        if cap.end_s < cap.start_s {
            return Err(VideoError::BadRange(ci));
        }
        let mut best: Option<FrameChoice> = None;
        for (fi, f) in frames.iter().enumerate() {
            if f.timestamp_s < cap.start_s || f.timestamp_s > cap.end_s {
                continue;
            }
            let sim = cosine(emb, &f.embedding)?;
            let better = match &best {
                None => true,
                Some(b) => sim > b.similarity || (sim == b.similarity && f.timestamp_s < b.timestamp_s),
            };
            if better {
                best = Some(FrameChoice { caption: ci, frame: fi, timestamp_s: f.timestamp_s, similarity: sim });
            }
        }
        out.push(best.ok_or(VideoError::NoCandidate { caption: ci, start_s: cap.start_s, end_s: cap.end_s })?);
    }
    Ok(out)
}

/// The `annotated` prompt binding: `Scene N (start s - end s): caption`.
pub fn annotate_captions(captions: &[TimedCaption]) -> String {
    captions
        .iter()
        .map(|c| format!("Scene {} ({}s - {}s): {}", c.scene_index + 1, c.start_s, c.end_s, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A validated caption-to-graph result. Entity ids are `"1"..="n"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphBundle {
    pub entities: Vec<BundleEntity>,
    pub scenes: Vec<BundleScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntity {
    pub id: String,
    pub entity: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleScene {
    pub scene: String,
    pub relations: Vec<BundleRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRelation {
    pub source: String,
    pub target: Option<String>,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BundleViolation {
    #[error("entity id {id} is not a stringified integer")]
    IdFormat { id: String },
    #[error("entity id {id} appears twice")]
    DuplicateId { id: String },
    #[error("entity {id} has an empty name")]
    EmptyEntity { id: String },
    #[error("{count} scenes for {captions} captions")]
    SceneCount { count: usize, captions: usize },
    #[error("scene {scene} refers to unknown entity {id}")]
    Unresolved { scene: usize, id: String },
    #[error("scene {scene} has a relation from entity {id} to itself")]
    SelfRelation { scene: usize, id: String },
    #[error("scene {scene} relates {a} and {b} in both directions")]
    InverseDuplicate { scene: usize, a: String, b: String },
    #[error("scene {scene} has an empty relation phrase")]
    EmptyRelation { scene: usize },
    #[error("bundle does not have the expected shape: {reason}")]
    Shape { reason: String },
}

fn relation_id(v: &Value) -> Result<Option<String>, String> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(s.clone())),
        other => Err(other.to_string()),
    }
}

/// Checks a raw bundle and renumbers entity ids to `1..=n` in listed order.
pub fn validate_bundle(raw: &RawBundle, caption_count: usize) -> Result<SceneGraphBundle, BundleViolation> {
    let mut renumber: BTreeMap<String, String> = BTreeMap::new();
    let mut entities = Vec::with_capacity(raw.entities.len());
    for (k, e) in raw.entities.iter().enumerate() {
        let id = match &e.id {
            Value::String(s) if !s.is_empty() && s.chars().all(|c| c.is_ascii_digit()) => s.clone(),
            other => return Err(BundleViolation::IdFormat { id: other.to_string() }),
        };
        if e.entity.trim().is_empty() {
            return Err(BundleViolation::EmptyEntity { id });
        }
        let fresh = (k + 1).to_string();
        if renumber.insert(id.clone(), fresh.clone()).is_some() {
            return Err(BundleViolation::DuplicateId { id });
        }
        entities.push(BundleEntity {
            id: fresh,
            entity: e.entity.trim().to_string(),
            attributes: e.attributes.clone().unwrap_or_default(),
        });
    }
    if raw.scenes.len() != caption_count {
        return Err(BundleViolation::SceneCount { count: raw.scenes.len(), captions: caption_count });
    }
    let mut scenes = Vec::with_capacity(raw.scenes.len());
    for (si, s) in raw.scenes.iter().enumerate() {
        let mut pairs = BTreeSet::new();
        let mut relations = Vec::with_capacity(s.relations.len());
        for rel in &s.relations {
            let resolve = |v: &Value| -> Result<Option<String>, BundleViolation> {
                let id = relation_id(v).map_err(|id| BundleViolation::Unresolved { scene: si, id })?;
                match id {
                    None => Ok(None),
                    Some(id) => renumber
                        .get(&id)
                        .cloned()
                        .map(Some)
                        .ok_or(BundleViolation::Unresolved { scene: si, id }),
                }
            };
            let source = resolve(&rel.source)?.ok_or(BundleViolation::Unresolved { scene: si, id: "null".into() })?;
            let target = resolve(&rel.target)?;
            if rel.relation.trim().is_empty() {
                return Err(BundleViolation::EmptyRelation { scene: si });
            }
            if let Some(t) = &target {
                if *t == source {
                    return Err(BundleViolation::SelfRelation { scene: si, id: source });
                }
                if pairs.contains(&(t.clone(), source.clone())) {
                    return Err(BundleViolation::InverseDuplicate { scene: si, a: source, b: t.clone() });
                }
                pairs.insert((source.clone(), t.clone()));
            }
            relations.push(BundleRelation { source, target, relation: rel.relation.trim().to_string() });
        }
        scenes.push(BundleScene { scene: s.scene.clone().unwrap_or_else(|| format!("scene_{}", si + 1)), relations });
    }
    Ok(SceneGraphBundle { entities, scenes })
}

/// Converts a validated bundle to a video-frame content graph.
///
/// Each scene is one image (its selected frame). An entity becomes one visual
/// node anchored to the first scene where it takes part in a relation (scene
/// 0 if it never does); every relation becomes an edge tagged with its scene.
pub fn bundle_to_graph(bundle: &SceneGraphBundle) -> ContentGraph {
    let mut graph = ContentGraph::new(Domain::VF, bundle.scenes.len().max(1));
    let mut anchor: BTreeMap<&str, usize> = BTreeMap::new();
    for (si, s) in bundle.scenes.iter().enumerate() {
        for rel in &s.relations {
            for id in std::iter::once(&rel.source).chain(rel.target.iter()) {
                anchor.entry(id.as_str()).or_insert(si);
            }
        }
    }
    let mut name_count: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &bundle.entities {
        *name_count.entry(e.entity.as_str()).or_default() += 1;
    }
    let mut taken: BTreeSet<String> =
        bundle.entities.iter().filter(|e| name_count[e.entity.as_str()] == 1).map(|e| e.entity.clone()).collect();
    let mut next: BTreeMap<&str, usize> = BTreeMap::new();
    let node_id = |id: &str| NodeId::new(format!("e{id}"));
    for e in &bundle.entities {
        let display_name = if name_count[e.entity.as_str()] > 1 {
            let k = next.entry(e.entity.as_str()).or_insert(0);
            loop {
                *k += 1;
                let candidate = format!("{}_{k}", e.entity);
                if taken.insert(candidate.clone()) {
                    break candidate;
                }
            }
        } else {
            e.entity.clone()
        };
        let image = anchor.get(e.id.as_str()).copied().unwrap_or(0);
        let mut node = EntityNode::visual(node_id(&e.id).0, e.entity.clone(), image).with_attributes(e.attributes.iter().cloned());
        node.display_name = display_name;
        graph.nodes.push(node);
    }
    for (si, s) in bundle.scenes.iter().enumerate() {
        for rel in &s.relations {
            let edge = match &rel.target {
                Some(t) => RelationEdge::new(&node_id(&rel.source), &node_id(t), rel.relation.clone()),
                None => RelationEdge::solo(&node_id(&rel.source), rel.relation.clone()),
            };
            graph.edges.push(edge.with_image_tag(si));
        }
    }
    graph
}

/// One caption-to-graph exchange over the whole caption list, validated, with
/// one further exchange if the bundle is rejected.
pub fn captions_to_graph(
    captions: &[TimedCaption],
    gateway: &Gateway,
    model_id: &str,
) -> Result<(SceneGraphBundle, ContentGraph), VideoError> {
    if captions.is_empty() {
        return Err(VideoError::Empty);
    }
    let b = bindings([("annotated", annotate_captions(captions))]);
    let mut last = None;
    for attempt in 0..2 {
        let spec = ExchangeSpec::new(TemplateId::CaptionToGraph, &b, model_id, Decoding::GENERATION)
            .tag("bundle_attempt", (attempt + 1).to_string());
        let (value, _) = gateway.exchange_payload(&spec)?;
        let raw: RawBundle = match decode(&value) {
            Ok(r) => r,
            Err(f) => {
                last = Some(BundleViolation::Shape { reason: f.reason });
                continue;
            }
        };
        match validate_bundle(&raw, captions.len()) {
            Ok(bundle) => {
                let graph = bundle_to_graph(&bundle);
                return Ok((bundle, graph));
            }
            Err(v) => {
                log::info!("caption bundle rejected: {v}");
                last = Some(v);
            }
        }
    }
    Err(VideoError::Bundle(last.expect("two attempts ran")))
}

/// One captioned video as listed on disk: captions in order and the frames
/// extracted from it (paths relative to the listing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSource {
    pub video_id: String,
    pub captions: Vec<SourceCaption>,
    pub frames: Vec<SourceFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCaption {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub timestamp_s: f64,
    pub path: String,
}

/// A video turned into a frame set and its graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub captions: Vec<TimedCaption>,
    pub choices: Vec<FrameChoice>,
    /// Chosen frame per caption, in caption order.
    pub image_refs: Vec<String>,
    pub bundle: SceneGraphBundle,
    pub graph: ContentGraph,
}

/// Picks a frame per caption by text–image similarity, then builds the
/// coreference-resolved graph from the captions.
pub fn ingest_video(
    source: &VideoSource,
    base_dir: &std::path::Path,
    embedder: &dyn crate::embed::Embedder,
    gateway: &Gateway,
    model_id: &str,
) -> Result<VideoSample, VideoError> {
    use crate::embed::EmbedKind;

    let captions = TimedCaption::ordered(source.captions.iter().map(|c| (c.text.clone(), c.start_s, c.end_s)));
    if captions.is_empty() {
        return Err(VideoError::Empty);
    }
    let texts: Vec<String> = captions.iter().map(|c| c.text.clone()).collect();
    let caption_vectors = embedder.embed(EmbedKind::ClipText, &texts)?;
    let payloads = source
        .frames
        .iter()
        .map(|f| embedder.image_payload(&f.path, base_dir))
        .collect::<Result<Vec<_>, _>>()?;
    let frame_vectors = embedder.embed(EmbedKind::ClipImage, &payloads)?;
    let frames: Vec<CandidateFrame> = source
        .frames
        .iter()
        .zip(frame_vectors)
        .map(|(f, embedding)| CandidateFrame { timestamp_s: f.timestamp_s, path: f.path.clone(), embedding })
        .collect();
    let choices = select_frames(&frames, &captions, &caption_vectors)?;
    let (bundle, graph) = captions_to_graph(&captions, gateway, model_id)?;
    Ok(VideoSample {
        video_id: source.video_id.clone(),
        image_refs: choices.iter().map(|c| frames[c.frame].path.clone()).collect(),
        captions,
        choices,
        bundle,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::{parse_payload, PayloadSchema, RetryPolicy, ScriptedProvider, SyntheticProvider};

    fn frame(t: f64, v: Vec<f32>) -> CandidateFrame {
        CandidateFrame { timestamp_s: t, path: format!("f{t}.jpg"), embedding: v }
    }

    #[test]
    fn antipodal_frames() {
        let caps = TimedCaption::ordered([("a dog runs", 0.0, 2.0)]);
        let frames = vec![frame(0.0, vec![-1.0, 0.0]), frame(1.0, vec![1.0, 0.0])];
        let c = select_frames(&frames, &caps, &[vec![1.0, 0.0]]).unwrap();
        assert_eq!((c[0].frame, c[0].similarity), (1, 1.0));
    }

    #[test]
    fn ties_go_to_the_earliest_frame() {
        let caps = TimedCaption::ordered([("x", 0.0, 5.0)]);
        let frames = vec![frame(3.0, vec![0.0, 1.0]), frame(2.0, vec![0.0, 1.0]), frame(4.0, vec![1.0, 0.0])];
        let c = select_frames(&frames, &caps, &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(c[0].timestamp_s, 2.0);
    }

    #[test]
    fn window_restriction_and_errors() {
        let caps = TimedCaption::ordered([("x", 10.0, 12.0)]);
        let frames = vec![frame(1.0, vec![1.0])];
        assert!(matches!(select_frames(&frames, &caps, &[vec![1.0]]), Err(VideoError::NoCandidate { caption: 0, .. })));
        let caps = TimedCaption::ordered([("x", 0.0, 2.0)]);
        assert!(matches!(
            select_frames(&frames, &caps, &[vec![1.0, 0.0]]),
            Err(VideoError::Embed(EmbedError::Dimension(2, 1)))
        ));
    }

    #[test]
    fn one_fps_candidates() {
        assert_eq!(candidate_timestamps(3.0, 6.5, 1.0), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(candidate_timestamps(2.0, 2.0, 1.0), vec![2.0]);
        assert!(candidate_timestamps(5.0, 2.0, 1.0).is_empty());
    }

    fn raw(text: &str) -> RawBundle {
        decode(&parse_payload(text, PayloadSchema::SceneGraphBundle).unwrap()).unwrap()
    }

    #[test]
    fn single_solo_caption() {
        let caps = TimedCaption::ordered([("a dog runs", 0.0, 3.0)]);
        let gw = Gateway::new(Arc::new(SyntheticProvider::new()), RetryPolicy::immediate(2), 2);
        let (bundle, graph) = captions_to_graph(&caps, &gw, "m").unwrap();
        assert_eq!(bundle.entities, vec![BundleEntity { id: "1".into(), entity: "dog".into(), attributes: vec![] }]);
        assert_eq!(bundle.scenes[0].relations, vec![BundleRelation { source: "1".into(), target: None, relation: "runs".into() }]);
        assert_eq!(graph.domain, Domain::VF);
        assert_eq!(graph.edges[0].object_id, None);
        assert_eq!(graph.edges[0].image_tag, Some(0));
        graph.validate(false).unwrap();
    }

    #[test]
    fn coreferent_mentions_become_one_node() {
        let caps = TimedCaption::ordered([
            ("A former president walks to the stage", 3.0, 10.0),
            ("A man gives a speech to the crowd", 5.0, 12.0),
        ]);
        let merged = r#"{"entities": [
              {"id": "1", "entity": "former president", "attributes": []},
              {"id": "2", "entity": "stage", "attributes": []},
              {"id": "3", "entity": "crowd", "attributes": []}],
            "scenes": [
              {"scene": "scene_1", "relations": [{"source": "1", "target": "2", "relation": "walks to"}]},
              {"scene": "scene_2", "relations": [{"source": "1", "target": "3", "relation": "gives a speech to"}]}]}"#;
        let gw = Gateway::new(Arc::new(ScriptedProvider::texts([merged])), RetryPolicy::immediate(2), 2);
        let (_, graph) = captions_to_graph(&caps, &gw, "m").unwrap();
        let president: Vec<&EntityNode> = graph.nodes.iter().filter(|n| n.name == "former president").collect();
        assert_eq!(president.len(), 1);
        assert_eq!(president[0].origin.image_index(), Some(0));
        let tags: Vec<Option<usize>> = graph.edges.iter().filter(|edge| edge.subject_id == president[0].id).map(|edge| edge.image_tag).collect();
        assert_eq!(tags, [Some(0), Some(1)]);
        assert_eq!(graph.image_count, 2);
        // the crowd is anchored to the scene it first appears in
        assert_eq!(graph.nodes[2].origin.image_index(), Some(1));
    }

    #[test]
    fn ids_are_renumbered_contiguously() {
        let b = validate_bundle(
            &raw(r#"{"entities": [{"id": "7", "entity": "cat"}, {"id": "3", "entity": "mat", "attributes": ["red"]}],
                    "scenes": [{"relations": [{"source": "7", "target": "3", "relation": "sits on"}]}]}"#),
            1,
        )
        .unwrap();
        assert_eq!(b.entities.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["1", "2"]);
        assert_eq!(b.scenes[0].relations[0].source, "1");
        assert_eq!(b.scenes[0].relations[0].target.as_deref(), Some("2"));
        assert_eq!(b.scenes[0].scene, "scene_1");
    }

    /// The five malformed-bundle fixtures, each with the violation it must raise.
    const MALFORMED: [(&str, &str); 5] = [
        (
            "numeric id",
            r#"{"entities": [{"id": 1, "entity": "dog", "attributes": []}],
                "scenes": [{"scene": "scene_1", "relations": []}]}"#,
        ),
        (
            "dangling target",
            r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}],
                "scenes": [{"scene": "scene_1", "relations": [{"source": "1", "target": "9", "relation": "chases"}]}]}"#,
        ),
        (
            "scene count",
            r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}],
                "scenes": [{"scene": "scene_1", "relations": []}, {"scene": "scene_2", "relations": []}]}"#,
        ),
        (
            "inverse duplicate",
            r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}, {"id": "2", "entity": "cat", "attributes": []}],
                "scenes": [{"scene": "scene_1", "relations": [
                    {"source": "1", "target": "2", "relation": "chases"},
                    {"source": "2", "target": "1", "relation": "is chased by"}]}]}"#,
        ),
        (
            "duplicate id",
            r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}, {"id": "1", "entity": "cat", "attributes": []}],
                "scenes": [{"scene": "scene_1", "relations": []}]}"#,
        ),
    ];

    #[test]
    fn malformed_bundles_are_rejected() {
        let kinds: Vec<String> = MALFORMED
            .iter()
            .map(|(_, text)| {
                let v = validate_bundle(&raw(text), 1).unwrap_err();
                serde_json::to_value(&v).unwrap()["kind"].as_str().unwrap().to_string()
            })
            .collect();
        assert_eq!(kinds, ["id_format", "unresolved", "scene_count", "inverse_duplicate", "duplicate_id"]);
    }

    #[test]
    fn rejected_bundle_gets_one_retry() {
        let caps = TimedCaption::ordered([("a dog runs", 0.0, 3.0)]);
        let good = r#"{"entities": [{"id": "1", "entity": "dog", "attributes": []}],
                       "scenes": [{"scene": "scene_1", "relations": [{"source": "1", "target": null, "relation": "runs"}]}]}"#;
        let gw = Gateway::new(Arc::new(ScriptedProvider::texts([MALFORMED[1].1, good])), RetryPolicy::immediate(2), 2);
        assert!(captions_to_graph(&caps, &gw, "m").is_ok());
        let gw = Gateway::new(Arc::new(ScriptedProvider::texts([MALFORMED[1].1, MALFORMED[0].1])), RetryPolicy::immediate(2), 2);
        assert!(matches!(captions_to_graph(&caps, &gw, "m"), Err(VideoError::Bundle(BundleViolation::IdFormat { .. }))));
    }

    #[test]
    fn annotation_format() {
        let caps = TimedCaption::ordered([("a dog runs", 0.0, 3.5), ("it stops", 2.0, 4.0)]);
        assert_eq!(annotate_captions(&caps), "Scene 1 (0s - 3.5s): a dog runs\nScene 2 (2s - 4s): it stops");
    }

    #[test]
    fn video_end_to_end_with_recorded_vectors() {
        use crate::embed::{EmbedKind, RecordedEmbedder};
        let source = VideoSource {
            video_id: "v1".into(),
            captions: vec![
                SourceCaption { text: "A man opens a door.".into(), start_s: 0.0, end_s: 2.0 },
                SourceCaption { text: "The man sits on a chair.".into(), start_s: 2.0, end_s: 4.0 },
            ],
            frames: [0.0, 1.0, 2.0, 3.0, 4.0]
                .iter()
                .map(|&t| SourceFrame { timestamp_s: t, path: format!("frames/{t}.jpg") })
                .collect(),
        };
        let mut emb = RecordedEmbedder::default();
        emb.insert(EmbedKind::ClipText, "A man opens a door.", vec![1.0, 0.0]);
        emb.insert(EmbedKind::ClipText, "The man sits on a chair.", vec![0.0, 1.0]);
        // Frame 1 s is the best match for caption 0; 4 s for caption 1 (the
        // 2 s frame is in both windows but loses to 4 s).
        for (t, v) in [(0.0, [0.5, 0.5]), (1.0, [0.9, 0.1]), (2.0, [0.6, 0.4]), (3.0, [0.2, 0.8]), (4.0, [0.1, 0.9])] {
            emb.insert(EmbedKind::ClipImage, format!("frames/{t}.jpg"), v.to_vec());
        }
        let gw = Gateway::new(Arc::new(SyntheticProvider::new()), RetryPolicy::immediate(2), 2);
        let out = ingest_video(&source, std::path::Path::new("."), &emb, &gw, "m").unwrap();
        assert_eq!(out.image_refs, ["frames/1.jpg", "frames/4.jpg"]);
        assert_eq!(out.graph.image_count, 2);
        assert_eq!(out.graph.domain, Domain::VF);
    }
}
