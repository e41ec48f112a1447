use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::payload::PayloadSchema;

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` is missing a binding for `{name}`")]
    MissingBinding { template: TemplateId, name: String },
    #[error("template `{template}` has no placeholder `{name}`")]
    UnknownBinding { template: TemplateId, name: String },
    #[error("template `{template}` is malformed at byte {offset}")]
    Malformed { template: TemplateId, offset: usize },
}

/// Every prompt the pipeline sends. Bodies live in `assets/prompts/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    TextNodeAuthorship,
    TextNodeHumanInvolvement,
    TextNodeTemporal,
    TextNodeLocation,
    TextNodePurpose,
    TextNodeOwnership,
    EdgeGeneration,
    ContextGeneration,
    QaGeneration,
    CotGeneration,
    CaptionToGraph,
    ParagraphPlain,
    ParagraphFigure,
    EntityInventory,
    Judge,
    EvalDirect,
    EvalCot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 17] = [
        TemplateId::TextNodeAuthorship,
        TemplateId::TextNodeHumanInvolvement,
        TemplateId::TextNodeTemporal,
        TemplateId::TextNodeLocation,
        TemplateId::TextNodePurpose,
        TemplateId::TextNodeOwnership,
        TemplateId::EdgeGeneration,
        TemplateId::ContextGeneration,
        TemplateId::QaGeneration,
        TemplateId::CotGeneration,
        TemplateId::CaptionToGraph,
        TemplateId::ParagraphPlain,
        TemplateId::ParagraphFigure,
        TemplateId::EntityInventory,
        TemplateId::Judge,
        TemplateId::EvalDirect,
        TemplateId::EvalCot,
    ];

    /// The six text-node category prompts.
    pub const TEXT_NODE: [TemplateId; 6] = [
        TemplateId::TextNodeAuthorship,
        TemplateId::TextNodeHumanInvolvement,
        TemplateId::TextNodeTemporal,
        TemplateId::TextNodeLocation,
        TemplateId::TextNodePurpose,
        TemplateId::TextNodeOwnership,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::TextNodeAuthorship => "text_node_authorship",
            TemplateId::TextNodeHumanInvolvement => "text_node_human_involvement",
            TemplateId::TextNodeTemporal => "text_node_temporal",
            TemplateId::TextNodeLocation => "text_node_location",
            TemplateId::TextNodePurpose => "text_node_purpose",
            TemplateId::TextNodeOwnership => "text_node_ownership",
            TemplateId::EdgeGeneration => "edge_generation",
            TemplateId::ContextGeneration => "context_generation",
            TemplateId::QaGeneration => "qa_generation",
            TemplateId::CotGeneration => "cot_generation",
            TemplateId::CaptionToGraph => "caption_to_graph",
            TemplateId::ParagraphPlain => "paragraph_plain",
            TemplateId::ParagraphFigure => "paragraph_figure",
            TemplateId::EntityInventory => "entity_inventory",
            TemplateId::Judge => "judge",
            TemplateId::EvalDirect => "eval_direct",
            TemplateId::EvalCot => "eval_cot",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::TextNodeAuthorship => include_str!("../../assets/prompts/text_node_authorship.txt"),
            TemplateId::TextNodeHumanInvolvement => {
                include_str!("../../assets/prompts/text_node_human_involvement.txt")
            }
            TemplateId::TextNodeTemporal => include_str!("../../assets/prompts/text_node_temporal.txt"),
            TemplateId::TextNodeLocation => include_str!("../../assets/prompts/text_node_location.txt"),
            TemplateId::TextNodePurpose => include_str!("../../assets/prompts/text_node_purpose.txt"),
            TemplateId::TextNodeOwnership => include_str!("../../assets/prompts/text_node_ownership.txt"),
            TemplateId::EdgeGeneration => include_str!("../../assets/prompts/edge_generation.txt"),
            TemplateId::ContextGeneration => include_str!("../../assets/prompts/context_generation.txt"),
            TemplateId::QaGeneration => include_str!("../../assets/prompts/qa_generation.txt"),
            TemplateId::CotGeneration => include_str!("../../assets/prompts/cot_generation.txt"),
            TemplateId::CaptionToGraph => include_str!("../../assets/prompts/caption_to_graph.txt"),
            TemplateId::ParagraphPlain => include_str!("../../assets/prompts/paragraph_plain.txt"),
            TemplateId::ParagraphFigure => include_str!("../../assets/prompts/paragraph_figure.txt"),
            TemplateId::EntityInventory => include_str!("../../assets/prompts/entity_inventory.txt"),
            TemplateId::Judge => include_str!("../../assets/prompts/judge.txt"),
            TemplateId::EvalDirect => include_str!("../../assets/prompts/eval_direct.txt"),
            TemplateId::EvalCot => include_str!("../../assets/prompts/eval_cot.txt"),
        }
    }

    pub fn expected_payload(self) -> PayloadSchema {
        match self {
            TemplateId::TextNodeAuthorship
            | TemplateId::TextNodeHumanInvolvement
            | TemplateId::TextNodeTemporal
            | TemplateId::TextNodeLocation
            | TemplateId::TextNodePurpose
            | TemplateId::TextNodeOwnership => PayloadSchema::Triple,
            TemplateId::EdgeGeneration => PayloadSchema::ObjectList,
            TemplateId::ContextGeneration
            | TemplateId::CotGeneration
            | TemplateId::Judge
            | TemplateId::EvalDirect
            | TemplateId::EvalCot => PayloadSchema::Text,
            TemplateId::QaGeneration => PayloadSchema::QaPair,
            TemplateId::CaptionToGraph => PayloadSchema::SceneGraphBundle,
            TemplateId::ParagraphPlain | TemplateId::ParagraphFigure => PayloadSchema::ObjectList,
            TemplateId::EntityInventory => PayloadSchema::StringList,
        }
    }

    /// Text-node categories whose prompts were written for this project rather
    /// than transcribed; listed in the prompt documentation.
    pub fn is_reconstruction(self) -> bool {
        matches!(
            self,
            TemplateId::TextNodeLocation
                | TemplateId::TextNodePurpose
                | TemplateId::TextNodeOwnership
                | TemplateId::EntityInventory
                | TemplateId::Judge
                | TemplateId::EvalDirect
                | TemplateId::EvalCot
        )
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate { id: self, body: self.body(), expected_payload: self.expected_payload() }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

/// Appended to a prompt when the first completion did not parse.
pub const JSON_REMINDER: &str = include_str!("../../assets/prompts/json_reminder.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
    pub expected_payload: PayloadSchema,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// Splits a body in Python `str.format` style: `{{` and `}}` are literal
/// braces, `{name}` is a placeholder.
fn pieces(template: TemplateId, body: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Piece::Literal(&body[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Piece::Literal(&body[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'{' => {
                let close = body[i + 1..]
                    .find('}')
                    .ok_or(TemplateError::Malformed { template, offset: i })?;
                let name = &body[i + 1..i + 1 + close];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(TemplateError::Malformed { template, offset: i });
                }
                out.push(Piece::Literal(&body[lit_start..i]));
                out.push(Piece::Placeholder(name));
                i += close + 2;
                lit_start = i;
            }
            b'}' => return Err(TemplateError::Malformed { template, offset: i }),
            _ => i += 1,
        }
    }
    out.push(Piece::Literal(&body[lit_start..]));
    Ok(out)
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Result<BTreeSet<&'static str>, TemplateError> {
        Ok(pieces(self.id, self.body)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Placeholder(n) => Some(n),
                Piece::Literal(_) => None,
            })
            .collect())
    }

    /// Substitutes every placeholder. Bindings must match the placeholder set exactly.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        let parts = pieces(self.id, self.body)?;
        let declared = self.placeholders()?;
        if let Some(extra) = bindings.keys().find(|k| !declared.contains(k.as_str())) {
            return Err(TemplateError::UnknownBinding { template: self.id, name: extra.clone() });
        }
        let mut out = String::with_capacity(self.body.len() + 256);
        for p in parts {
            match p {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => match bindings.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(TemplateError::MissingBinding {
                            template: self.id,
                            name: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Renders a template by id.
pub fn render(template: TemplateId, bindings: &Bindings) -> Result<String, TemplateError> {
    template.template().render(bindings)
}

/// Builds a [`Bindings`] map from `(name, value)` pairs.
pub fn bindings<I, K, V>(pairs: I) -> Bindings
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}
