//! Spatial-reasoning VQA toolkit for multi-camera driving scenes.
//!
//! The crate covers the whole data path: scene ingestion, geometric ground
//! truth, object filtering, question generation, response parsing, benchmark
//! scoring, GRPO reward channels and the chain-of-thought data pipeline.
//! Everything that talks to a language model goes through [`client::ChatModel`],
//! so every stage can run offline against a scripted client.

pub mod geometry;
pub mod scene;
pub mod client;
pub mod filtering;
pub mod prompt;
pub mod taskgen;
pub mod response;
pub mod scoring;
pub mod reward;
pub mod cot;
