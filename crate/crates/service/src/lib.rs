//! Listening-test collection service.
//!
//! Subjects register with their age, gender and equipment specs, are
//! assigned the least-used questionnaire, answer its pairs one at a time on
//! a 1..=5 scale and the answers are exported in the corpus JSONL format.
//! State lives in an append-only event log replayed on startup.

mod error;
mod http;
pub mod intake;
pub mod log;
pub mod plan;
mod service;
pub mod state;

pub use error::{Result, ServiceError};
pub use http::{router, serve};
pub use service::{Service, SessionCreated};
