//! Provider-agnostic text-model access: prompt templates, completion with
//! retries, and schema-checked JSON extraction.

mod gateway;
mod http;
mod payload;
mod provider;
mod synthetic;
mod template;

pub use gateway::{
    AttemptRecord, ExchangeSpec, Gateway, LlmError, LlmExchange, PayloadOutcome, Permit, PermitLimiter, RetryPolicy,
};
pub use http::{HttpChatProvider, HttpEndpoint};
pub(crate) use http::{classify_status, classify_transport};
pub use payload::{
    decode, parse_payload, ParseFailure, PayloadSchema, QaPayload, RawBundle, RawBundleEntity, RawBundleRelation,
    RawBundleScene, TriplePayload,
};
pub use provider::{
    CompletionProvider, CompletionRequest, Decoding, ProviderError, RecordedProvider, Recording, RecordingProvider,
    ScriptedProvider,
};
pub use synthetic::SyntheticProvider;
pub use template::{bindings, render, Bindings, PromptTemplate, TemplateError, TemplateId, JSON_REMINDER};
