//! Compliance evaluation of model cards against normalized policy documents.

pub mod aggregation;
pub mod config;
pub mod digest;
pub mod engine;
pub mod exec;
pub mod llm;
pub mod metrics;
pub mod model_card;
pub mod pipeline;
pub mod policy;
pub mod relevancy;
pub mod store;
