//! Scene-graph annotations in a minimal GQA-compatible JSON layout.
//!
//! ```json
//! {
//!   "2370799": {
//!     "file": "images/2370799.jpg",
//!     "objects": {
//!       "o1": {"name": "chair", "attributes": ["wooden"],
//!              "relations": [{"name": "next to", "object": "o2"}]},
//!       "o2": {"name": "table", "attributes": [], "relations": []}
//!     }
//!   }
//! }
//! ```
//!
//! Top-level keys are image ids. Relations use GQA's `name`/`object` keys
//! (`relation`/`target_object_id` are accepted too). Any other fields, such
//! as GQA's boxes and image sizes, are carried through unchanged.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{SceneGraph, SceneObject, SceneRelation};

#[derive(Debug, Error)]
pub enum SceneIngestError {
    #[error("{path}: malformed JSON: {reason}")]
    Json { path: String, reason: String },
    #[error("{path}: not a scene-graph file: {reason}")]
    Schema { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("catalog has {available} images, fewer than the {requested} requested")]
    CatalogTooSmall { available: usize, requested: usize },
    #[error("invalid set-size range {0}..={1}")]
    BadRange(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRelation {
    #[serde(rename = "name", alias = "relation")]
    pub relation: String,
    #[serde(rename = "object", alias = "target_object_id")]
    pub target: String,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub relations: Vec<RawRelation>,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSceneGraph {
    #[serde(skip)]
    pub image_id: String,
    #[serde(default)]
    pub objects: IndexMap<String, RawObject>,
    #[serde(flatten)]
    pub extra: IndexMap<String, Value>,
}

impl RawSceneGraph {
    /// The image file: the `file` field when present, else `<image_id>.jpg`.
    pub fn image_file(&self) -> String {
        match self.extra.get("file").and_then(Value::as_str) {
            Some(f) => f.to_string(),
            None => format!("{}.jpg", self.image_id),
        }
    }

    /// Relations whose target object is not in this image.
    pub fn dangling(&self) -> Vec<SceneDiagnostic> {
        let mut out = Vec::new();
        for (id, obj) in &self.objects {
            for rel in &obj.relations {
                if !self.objects.contains_key(&rel.target) {
                    out.push(SceneDiagnostic {
                        image_id: self.image_id.clone(),
                        object_id: id.clone(),
                        relation: rel.relation.clone(),
                        missing_target: rel.target.clone(),
                    });
                }
            }
        }
        out
    }

    /// The internal scene graph; dangling relations are dropped.
    pub fn to_scene_graph(&self) -> SceneGraph {
        let objects = self
            .objects
            .iter()
            .map(|(id, o)| SceneObject { id: id.clone(), name: o.name.clone(), attributes: o.attributes.clone() })
            .collect();
        let relations = self
            .objects
            .iter()
            .flat_map(|(id, o)| o.relations.iter().map(move |rel| (id, rel)))
            .filter(|(_, rel)| self.objects.contains_key(&rel.target))
            .map(|(id, rel)| SceneRelation { subject: id.clone(), relation: rel.relation.clone(), object: rel.target.clone() })
            .collect();
        SceneGraph { objects, relations }
    }
}

/// A relation pointing at an object the image does not have.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDiagnostic {
    pub image_id: String,
    pub object_id: String,
    pub relation: String,
    pub missing_target: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedScenes {
    pub graphs: Vec<RawSceneGraph>,
    pub diagnostics: Vec<SceneDiagnostic>,
}

/// Parses one scene-graph document. `origin` names it in errors.
pub fn parse_scene_str(text: &str, origin: &str) -> Result<ParsedScenes, SceneIngestError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| SceneIngestError::Json { path: origin.into(), reason: e.to_string() })?;
    let map: IndexMap<String, RawSceneGraph> = serde_json::from_value(value)
        .map_err(|e| SceneIngestError::Schema { path: origin.into(), reason: e.to_string() })?;
    let mut parsed = ParsedScenes::default();
    for (image_id, mut graph) in map {
        graph.image_id = image_id;
        parsed.diagnostics.extend(graph.dangling());
        parsed.graphs.push(graph);
    }
    Ok(parsed)
}

pub fn parse_scene_file(path: &Path) -> Result<ParsedScenes, SceneIngestError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| SceneIngestError::Io { path: origin.clone(), source })?;
    parse_scene_str(&text, &origin)
}

/// Serializes graphs back to the file layout (image id keys, in order).
pub fn scenes_to_json(graphs: &[RawSceneGraph]) -> Value {
    let map: IndexMap<&str, &RawSceneGraph> = graphs.iter().map(|graph| (graph.image_id.as_str(), graph)).collect();
    serde_json::to_value(map).expect("scene graphs serialize")
}

/// Parses many files in parallel. A file that fails is reported and skipped;
/// the others still load. Later duplicates of an image id are ignored.
pub fn load_catalog(paths: &[&Path]) -> (Vec<RawSceneGraph>, Vec<SceneDiagnostic>, Vec<SceneIngestError>) {
    let results: Vec<Result<ParsedScenes, SceneIngestError>> = paths.par_iter().map(|p| parse_scene_file(p)).collect();
    let mut graphs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    for r in results {
        match r {
            Ok(p) => {
                diagnostics.extend(p.diagnostics);
                graphs.extend(p.graphs.into_iter().filter(|graph| seen.insert(graph.image_id.clone())));
            }
            Err(e) => errors.push(e),
        }
    }
    (graphs, diagnostics, errors)
}

/// Draws `count` image sets. Each set size is uniform over `sizes` (capped
/// at the catalog size); members are distinct within a set.
pub fn sample_image_sets<R: Rng + ?Sized>(
    catalog: &[String],
    count: usize,
    sizes: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<Vec<Vec<String>>, SceneIngestError> {
    let (lo, hi) = (*sizes.start(), *sizes.end());
    if lo == 0 || lo > hi {
        return Err(SceneIngestError::BadRange(lo, hi));
    }
    if catalog.len() < lo {
        return Err(SceneIngestError::CatalogTooSmall { available: catalog.len(), requested: lo });
    }
    let hi = hi.min(catalog.len());
    Ok((0..count)
        .map(|_| {
            let size = rng.random_range(lo..=hi);
            catalog.choose_multiple(rng, size).cloned().collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    const TWO_IMAGES: &str = r#"{
      "img1": {"file": "images/img1.jpg", "width": 500, "objects": {
        "o1": {"name": "chair", "attributes": ["wooden"], "x": 3,
               "relations": [{"name": "next to", "object": "o2"}]},
        "o2": {"name": "table", "attributes": [], "relations": []}
      }},
      "img2": {"objects": {
        "o7": {"name": "dog", "relations": [{"relation": "chasing", "target_object_id": "o9"}]}
      }}
    }"#;

    #[test]
    fn parses_fixture_counts_and_dangling_targets() {
        let p = parse_scene_str(TWO_IMAGES, "fixture").unwrap();
        assert_eq!(p.graphs.len(), 2);
        assert_eq!(p.graphs[0].objects.len(), 2);
        assert_eq!(p.graphs[1].objects.len(), 1);
        assert_eq!(p.diagnostics, vec![SceneDiagnostic {
            image_id: "img2".into(),
            object_id: "o7".into(),
            relation: "chasing".into(),
            missing_target: "o9".into(),
        }]);
        assert_eq!(p.graphs[0].image_file(), "images/img1.jpg");
        assert_eq!(p.graphs[1].image_file(), "img2.jpg");
        let sg = p.graphs[0].to_scene_graph();
        assert_eq!(sg.relations, vec![SceneRelation { subject: "o1".into(), relation: "next to".into(), object: "o2".into() }]);
        assert!(p.graphs[1].to_scene_graph().relations.is_empty());
    }

    #[test]
    fn empty_object_map() {
        let p = parse_scene_str(r#"{"x": {"objects": {}}}"#, "f").unwrap();
        assert_eq!(p.graphs[0].objects.len(), 0);
        assert!(p.diagnostics.is_empty());
    }

    #[test]
    fn malformed_and_schema_errors() {
        assert!(matches!(parse_scene_str("{", "f"), Err(SceneIngestError::Json { .. })));
        assert!(matches!(parse_scene_str("[1, 2]", "f"), Err(SceneIngestError::Schema { .. })));
        assert!(matches!(
            parse_scene_str(r#"{"x": {"objects": {"o": {"attributes": []}}}}"#, "f"),
            Err(SceneIngestError::Schema { .. })
        ));
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let p = parse_scene_str(TWO_IMAGES, "f").unwrap();
        let text = serde_json::to_string(&scenes_to_json(&p.graphs)).unwrap();
        let q = parse_scene_str(&text, "f").unwrap();
        assert_eq!(p, q);
        // extra fields survive
        assert_eq!(q.graphs[0].objects["o1"].extra["x"], 3);
        assert_eq!(q.graphs[0].extra["width"], 500);
    }

    #[test]
    fn singleton_catalog_gives_singletons() {
        let catalog = vec!["a".to_string()];
        let sets = sample_image_sets(&catalog, 50, 1..=6, &mut seeded(1)).unwrap();
        assert!(sets.iter().all(|s| s == &["a"]));
        assert!(matches!(
            sample_image_sets(&[], 1, 1..=6, &mut seeded(1)),
            Err(SceneIngestError::CatalogTooSmall { .. })
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let catalog: Vec<String> = (0..20).map(|i| format!("img{i}")).collect();
        let a = sample_image_sets(&catalog, 30, 1..=6, &mut seeded(9)).unwrap();
        let b = sample_image_sets(&catalog, 30, 1..=6, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let unique: BTreeSet<&String> = s.iter().collect();
            assert_eq!(unique.len(), s.len());
        }
    }

    #[test]
    fn set_sizes_are_uniform() {
        let catalog: Vec<String> = (0..20).map(|i| format!("img{i}")).collect();
        let n = 10_000;
        let sets = sample_image_sets(&catalog, n, 1..=6, &mut seeded(2024)).unwrap();
        let mut hist = [0usize; 6];
        for s in &sets {
            hist[s.len() - 1] += 1;
        }
        let p = 1.0 / 6.0;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for c in hist {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{hist:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // chi-square, 5 degrees of freedom, 0.999 quantile
        assert!(chi2 < 20.515, "chi2 = {chi2}");
    }
}
