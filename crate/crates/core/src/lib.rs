//! Multi-task fine-tuning of a small frozen decoder-only transformer for three
//! fact-checking tasks: claim detection, evidence re-ranking and stance
//! detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`backbone`]: the frozen decoder, low-rank adapters and NF4 quantization.
//! - [`heads`]: classification, pair-classification and language-model heads.
//! - [`data`]: dataset schemas, byte tokenizer, prompt templates, mixed batching
//!   and the synthetic generator.
//! - [`trainer`]: weighted multi-task loss, AdamW, schedules and sweeps.
//! - [`eval`]: F1 reports, evaluation drivers and the randomization test.
//! - [`checkpoint`] and [`report`]: on-disk formats.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod report;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use task::{Task, TaskMap};
