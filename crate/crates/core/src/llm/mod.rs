//! Chat-completion transport and the prediction calls built on it.

pub mod cache;
pub mod client;
pub mod labels;
pub mod predict;
pub mod stub;
pub mod wire;

pub use client::{ClientConfig, InferenceRequest, InferenceResponse, LlmClient};
pub use labels::{LabelMatch, LabelSchema};
pub use predict::{
    classify, generate_description, parse_probability, score, score_from_logprobs,
    Classification, GeneratedDescription, GenerationSettings, Scored, UNPARSED_SCORE,
};
pub use stub::{StubReply, StubServer};
pub use wire::{ChatCompletionRequest, ChatMessage, Role};
