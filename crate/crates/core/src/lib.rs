//! Cross-modal multi-hop QA generation over multimodal content graphs.
//!
//! The pipeline turns annotated visual sources (scene-graph images, captioned
//! videos, TeX papers) into content graphs, augments them with LLM-generated
//! textual entities, writes narrative context, samples reasoning chains,
//! generates question/answer/chain-of-thought triples and filters them. The
//! [`eval`] module scores model predictions on the resulting test files.

pub mod augment;
pub mod context_gen;
pub mod dataset;
pub mod embed;
pub mod eval;
pub mod filter;
pub mod graph;
pub mod ingest;
pub mod llm;
pub mod pipeline;
pub mod qa;
pub mod rng;
pub mod text;

#[cfg(test)]
mod testutil;
