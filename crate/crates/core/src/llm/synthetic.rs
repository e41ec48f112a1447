//! A rule-based stand-in for a text model.
//!
//! Every completion is a pure function of `(model_id, template, bindings,
//! tags)`, so pipeline runs against it are reproducible byte-for-byte. The
//! output is shaped to satisfy each stage's structural checks; it is not
//! meant to read well.

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::provider::{CompletionProvider, CompletionRequest, ProviderError};
use super::template::TemplateId;
use crate::text::{contains_phrase, split_sentences, split_typed_name};

const GIVEN: &[&str] = &[
    "Liora", "Orin", "Mara", "Tobias", "Selene", "Davor", "Imke", "Rafael", "Noor", "Ansel", "Petra", "Kenji",
];
const FAMILY: &[&str] = &[
    "Vex", "Calder", "Okafor", "Lindqvist", "Marsh", "Ferreira", "Hale", "Novak", "Sato", "Quill", "Brandt", "Ives",
];
const ORG_HEAD: &[&str] = &[
    "Veridian", "Northwind", "Bluehollow", "Ashgrove", "Silverline", "Redfern", "Coldbrook", "Harbor", "Eastgate",
    "Ironleaf", "Sunmere", "Oakridge",
];
const ORG_TAIL: &[&str] = &[
    "Grid Solutions", "Collective", "Foundation", "Works", "Institute", "Cooperative", "Trust", "Studios",
    "Guild", "Society", "Partners", "Labs",
];
const EVENTS: &[&str] = &[
    "Harvest Fair", "Product Launch Demo", "Winter Gala", "City Marathon", "Open Studio Day", "Night Market",
    "Heritage Walk", "Spring Expo", "Film Week", "Riverside Concert", "Science Fair", "Charity Auction",
];
const PLACES: &[&str] = &[
    "Old Town", "Harbor District", "Maple Quarter", "Eastside Commons", "Cedar Heights", "Mill Square",
    "Lakeshore Park", "Granite Row", "Willow Bend", "Station Hill", "Copper Yard", "Elm Crossing",
];

/// `(relation, entity type, name pool)` per text-node category.
fn category(template: TemplateId) -> (&'static str, &'static str, Pool) {
    match template {
        TemplateId::TextNodeAuthorship => ("designed by", "artisan", Pool::Person),
        TemplateId::TextNodeHumanInvolvement => ("maintained by", "company", Pool::Org),
        TemplateId::TextNodeTemporal => ("featured in", "event", Pool::Event),
        TemplateId::TextNodeLocation => ("located in", "district", Pool::Place),
        TemplateId::TextNodePurpose => ("used for", "project", Pool::Event),
        _ => ("owned by", "collector", Pool::Person),
    }
}

#[derive(Clone, Copy)]
enum Pool {
    Person,
    Org,
    Event,
    Place,
}

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0x1f]);
    }
    hasher.finalize().into()
}

fn pick<'a>(pool: &[&'a str], byte: u8) -> &'a str {
    pool[byte as usize % pool.len()]
}

fn proper_name(pool: Pool, d: &[u8; 32]) -> String {
    match pool {
        Pool::Person => format!("{} {}", pick(GIVEN, d[0]), pick(FAMILY, d[1])),
        Pool::Org => format!("{} {}", pick(ORG_HEAD, d[0]), pick(ORG_TAIL, d[1])),
        Pool::Event => format!("{} {}", pick(ORG_HEAD, d[2]), pick(EVENTS, d[1])),
        Pool::Place => pick(PLACES, d[0]).to_string(),
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticProvider;

impl SyntheticProvider {
    pub fn new() -> Self {
        SyntheticProvider
    }
}

fn binding<'a>(req: &'a CompletionRequest, key: &str) -> &'a str {
    req.bindings.get(key).map(String::as_str).unwrap_or("")
}

fn json_binding(req: &CompletionRequest, key: &str) -> Value {
    serde_json::from_str(binding(req, key)).unwrap_or(Value::Null)
}

/// Turns `"apple (Image 2)"` into `"apple shown in image 2"` and
/// `"company (Veridian Grid Solutions)"` into `"company Veridian Grid Solutions"`.
fn phrase(label: &str) -> String {
    if let Some(stem) = label.strip_suffix(" (Image)") {
        return format!("{stem} shown in the image");
    }
    if let Some((stem, tag)) = split_typed_name(label) {
        if let Some(n) = tag.strip_prefix("Image ") {
            if n.chars().all(|c| c.is_ascii_digit()) {
                return format!("{stem} shown in image {n}");
            }
        }
        return format!("{stem} {tag}");
    }
    label.to_string()
}

/// Label with any image tag removed.
fn bare(label: &str) -> &str {
    if let Some(stem) = label.strip_suffix(" (Image)") {
        return stem;
    }
    match split_typed_name(label) {
        Some((stem, tag)) if ["Image ", "Figure", "Table"].iter().any(|p| tag.starts_with(p)) => stem,
        _ => label,
    }
}

fn image_tag(label: &str) -> Option<String> {
    if label.ends_with(" (Image)") {
        return Some("the image".into());
    }
    let (_, tag) = split_typed_name(label)?;
    if tag.starts_with("Figure") || tag.starts_with("Table") {
        return Some(tag.to_string());
    }
    let n = tag.strip_prefix("Image ")?;
    n.chars().all(|c| c.is_ascii_digit()).then(|| format!("image {n}"))
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

impl SyntheticProvider {
    fn text_node(&self, req: &CompletionRequest) -> String {
        let subject = binding(req, "object");
        let d = digest(&[&req.model_id, req.template_id.as_str(), subject, binding(req, "image_caption")]);
        let (relation, ty, pool) = category(req.template_id);
        json!({"subject": subject, "relation": relation, "object": format!("{ty} ({})", proper_name(pool, &d))})
            .to_string()
    }

    fn edges(&self, req: &CompletionRequest) -> String {
        let names: Vec<String> = serde_json::from_value(json_binding(req, "list_of_entities")).unwrap_or_default();
        let mut out = Vec::new();
        for pair in names.windows(2) {
            let d = digest(&[&req.model_id, &pair[0], &pair[1]]);
            if !d[0].is_multiple_of(3) {
                let relation = pick(&["partnered with", "sponsored", "collaborated with", "hosted"], d[1]);
                out.push(json!({"subject": pair[0], "relation": relation, "object": pair[1]}));
            }
        }
        Value::Array(out).to_string()
    }

    fn context(&self, req: &CompletionRequest) -> String {
        let entities: Vec<String> = serde_json::from_value(json_binding(req, "entities")).unwrap_or_default();
        let relations = json_binding(req, "relations");
        let style = binding(req, "context_type");
        let mut sentences = vec![format!("This {} collects a few connected facts.", style.to_lowercase())];
        let mut covered: Vec<&str> = Vec::new();
        for r in relations.as_array().into_iter().flatten() {
            let (s, rel, o) = (str_field(r, "subject"), str_field(r, "relation"), str_field(r, "object"));
            sentences.push(format!("The {} is linked by \"{}\" to the {}.", phrase(s), rel, phrase(o)));
            covered.extend([s, o]);
        }
        for e in &entities {
            if !covered.contains(&e.as_str()) {
                sentences.push(format!("There is also the {}.", phrase(e)));
            }
        }
        sentences.join(" ")
    }

    fn question(&self, req: &CompletionRequest) -> String {
        // the prompt wraps the binding in brackets; the binding itself is the list body
        let triples: Value = serde_json::from_str(&format!("[{}]", binding(req, "triples"))).unwrap_or(Value::Null);
        let answer = binding(req, "last_object");
        let steps = triples.as_array().map_or(0, Vec::len);
        let head = triples.get(0).map_or_else(|| "the entity".to_string(), |t| format!("the {}", phrase(str_field(t, "subject"))));
        let ends_on_attribute = triples
            .as_array()
            .and_then(|a| a.last())
            .is_some_and(|t| str_field(t, "relation") == "is");
        let ask = if ends_on_attribute { "what property does it have" } else { "what is it" };
        let question = format!(
            "Follow {steps} linked facts starting from {head} to reach something in the images; {ask}?"
        );
        json!({"question": question, "answer": answer}).to_string()
    }

    fn cot(&self, req: &CompletionRequest) -> String {
        let subgraph = json_binding(req, "subgraph");
        let answer = binding(req, "answer");
        let mut sentences = vec!["The question asks which fact the chain leads to.".to_string()];
        for t in subgraph.as_array().into_iter().flatten() {
            let (s, rel, o) = (str_field(t, "subject"), str_field(t, "relation"), str_field(t, "object"));
            if let Some(fig) = t.get("figure").and_then(Value::as_str) {
                sentences.push(format!("From {fig}, the {} is related to the {} as \"{rel}\".", bare(s), bare(o)));
                continue;
            }
            let visual: Vec<String> = [s, o].iter().filter_map(|l| image_tag(l)).collect();
            let both_visual = visual.len() == 2 || (rel == "is" && !visual.is_empty());
            if both_visual {
                sentences.push(format!("From {}, the {} {} the {}.", visual[0], bare(s), rel, bare(o)));
            } else {
                sentences.push(format!("From the text context, the {} {} the {}.", bare(s), rel, bare(o)));
                for (label, tag) in [s, o].iter().filter_map(|l| image_tag(l).map(|t| (l, t))) {
                    sentences.push(format!("From {tag}, I can see the {}.", bare(label)));
                }
            }
        }
        sentences.push(format!("Therefore, the answer is {answer}."));
        sentences.join(" ")
    }

    fn caption_bundle(&self, req: &CompletionRequest) -> String {
        let mut entities: Vec<(String, String)> = Vec::new();
        let mut scenes = Vec::new();
        for (i, line) in binding(req, "annotated").lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let caption = line.split_once(':').map_or(line, |(_, c)| c).trim();
            let words: Vec<&str> = caption.split_whitespace().collect();
            let skip = usize::from(matches!(words.first().map(|w| w.to_lowercase()).as_deref(), Some("a" | "an" | "the")));
            let Some(noun) = words.get(skip) else {
                scenes.push(json!({"scene": format!("scene_{}", i + 1), "relations": []}));
                continue;
            };
            let noun = noun.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            let id = match entities.iter().position(|(_, n)| *n == noun) {
                Some(p) => entities[p].0.clone(),
                None => {
                    let id = (entities.len() + 1).to_string();
                    entities.push((id.clone(), noun.clone()));
                    id
                }
            };
            let action = words[skip + 1..].join(" ");
            let relations = if action.is_empty() {
                vec![]
            } else {
                vec![json!({"source": id, "target": null, "relation": action.trim_end_matches('.')})]
            };
            scenes.push(json!({"scene": format!("scene_{}", i + 1), "relations": relations}));
        }
        json!({
            "entities": entities.iter().map(|(id, n)| json!({"id": id, "entity": n, "attributes": []})).collect::<Vec<_>>(),
            "scenes": scenes,
        })
        .to_string()
    }

    fn paragraph_plain(&self, req: &CompletionRequest) -> String {
        let entities: Vec<String> = serde_json::from_value(json_binding(req, "entities_json")).unwrap_or_default();
        let mut out = Vec::new();
        for sentence in split_sentences(binding(req, "paragraph")) {
            let hits: Vec<&String> = entities.iter().filter(|e| contains_phrase(&sentence, e)).collect();
            for pair in hits.windows(2) {
                out.push(json!({
                    "source_entity": pair[0],
                    "target_entity": pair[1],
                    "relationship_description": sentence,
                }));
            }
        }
        Value::Array(out).to_string()
    }

    fn paragraph_figure(&self, req: &CompletionRequest) -> String {
        let entities: Vec<String> = serde_json::from_value(json_binding(req, "entities_json")).unwrap_or_default();
        let figures = json_binding(req, "figures_json");
        let labels: Vec<&str> = figures.as_array().into_iter().flatten().map(|f| str_field(f, "label")).collect();
        let mut out = Vec::new();
        for line in binding(req, "sentences_text").lines() {
            let Some((idx, sentence)) = line.strip_prefix('[').and_then(|l| l.split_once("] ")) else {
                continue;
            };
            let Ok(idx) = idx.parse::<usize>() else { continue };
            let Some(label) = labels.iter().find(|l| contains_phrase(sentence, l)) else {
                continue;
            };
            let hits: Vec<&String> = entities.iter().filter(|e| contains_phrase(sentence, e)).collect();
            let Some(source) = hits.first() else { continue };
            out.push(json!({
                "source_entity": source,
                "target_entity": hits.get(1),
                "relationship_description": sentence,
                "figure": label,
                "idx": [idx],
            }));
        }
        Value::Array(out).to_string()
    }

    fn inventory(&self, req: &CompletionRequest) -> String {
        let mut found: Vec<String> = Vec::new();
        for token in binding(req, "paper_text").split_whitespace() {
            let t = token.trim_matches(|c: char| !c.is_alphanumeric() && c != '-');
            let t = t.strip_suffix("'s").unwrap_or(t);
            let acronym = t.len() >= 2
                && t.chars().any(|c| c.is_ascii_uppercase())
                && t.chars().filter(|c| c.is_ascii_uppercase()).count() * 2 > t.len()
                && t.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
            if acronym && !found.iter().any(|f| f == t) {
                found.push(t.to_string());
            }
        }
        Value::from(found).to_string()
    }

    fn judge(&self, req: &CompletionRequest) -> String {
        let facts: Vec<&str> = binding(req, "facts").lines().filter(|l| !l.trim().is_empty()).collect();
        let modality = req.tags.get("modality").map(String::as_str).unwrap_or("");
        let d = digest(&[&req.model_id, modality, binding(req, "question")]);
        let Some(line) = facts.get(d[0] as usize % facts.len().max(1)) else {
            return "unknown".into();
        };
        let last = line.rsplit(['|', ':', ',']).next().unwrap_or(line);
        last.trim().trim_start_matches("- ").to_string()
    }
}

impl CompletionProvider for SyntheticProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        Ok(match req.template_id {
            t if TemplateId::TEXT_NODE.contains(&t) => self.text_node(req),
            TemplateId::EdgeGeneration => self.edges(req),
            TemplateId::ContextGeneration => self.context(req),
            TemplateId::QaGeneration => self.question(req),
            TemplateId::CotGeneration => self.cot(req),
            TemplateId::CaptionToGraph => self.caption_bundle(req),
            TemplateId::ParagraphPlain => self.paragraph_plain(req),
            TemplateId::ParagraphFigure => self.paragraph_figure(req),
            TemplateId::EntityInventory => self.inventory(req),
            TemplateId::Judge => self.judge(req),
            TemplateId::EvalDirect => "unknown".into(),
            _ => "I could not tell from the evidence. The answer is unknown.".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::payload::parse_payload;
    use crate::llm::provider::Decoding;
    use crate::llm::template::{render, Bindings};

    fn request(template: TemplateId, bindings: Bindings) -> CompletionRequest {
        CompletionRequest {
            template_id: template,
            prompt: render(template, &bindings).unwrap(),
            model_id: "synthetic".into(),
            decoding: Decoding::GENERATION,
            bindings,
            tags: Default::default(),
            attempt: 1,
        }
    }

    fn placeholder_bindings(t: TemplateId) -> Bindings {
        t.template()
            .placeholders()
            .unwrap()
            .into_iter()
            .map(|p| (p.to_string(), "[]".to_string()))
            .collect()
    }

    #[test]
    fn every_template_gets_a_conforming_completion() {
        for t in TemplateId::ALL {
            let req = request(t, placeholder_bindings(t));
            let raw = SyntheticProvider.complete(&req).unwrap();
            parse_payload(&raw, t.expected_payload()).unwrap_or_else(|e| panic!("{t}: {e} in {raw:?}"));
        }
    }

    #[test]
    fn text_node_is_typed_and_deterministic() {
        let b: Bindings = [("object", "chair"), ("image_caption", "a chair"), ("object_caption", "a wooden chair")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let req = request(TemplateId::TextNodeAuthorship, b);
        let a = SyntheticProvider.complete(&req).unwrap();
        assert_eq!(a, SyntheticProvider.complete(&req).unwrap());
        let v: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["subject"], "chair");
        assert!(split_typed_name(v["object"].as_str().unwrap()).is_some());
    }

    #[test]
    fn label_phrasing() {
        assert_eq!(phrase("telephone pole (Image 1)"), "telephone pole shown in image 1");
        assert_eq!(phrase("pole (Image)"), "pole shown in the image");
        assert_eq!(phrase("company (Veridian Grid Solutions)"), "company Veridian Grid Solutions");
        assert_eq!(bare("cord (Image 3)"), "cord");
        assert_eq!(image_tag("cord (Image 3)").as_deref(), Some("image 3"));
        assert_eq!(image_tag("company (Veridian)"), None);
    }
}
