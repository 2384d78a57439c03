//! Simulation lab for timing side channels in LLM serving caches.
//!
//! The crate models a single serving node with prefix (KV) and semantic
//! response caches, a calibrated synthetic latency law, and the attacker
//! tooling that infers cache state from observed time-to-first-token:
//! a time analyzer plus input constructors for structured-form and
//! semantic-cache probing. Everything runs on a virtual clock with
//! explicit seeded randomness, so runs are reproducible byte for byte.

pub mod analyzer;
pub mod attack;
pub mod harness;
pub mod model;
pub mod node;
pub mod prefix_cache;
#[cfg(feature = "socket-demo")]
pub mod protocol;
pub mod semantic_cache;
pub mod time;
pub mod timing;

pub mod cli;

pub use model::{FieldRecord, PromptTemplate, TokenSeq};
pub use node::{NodeConfig, RequestOutcome, ServingNode};
pub use time::{VirtualDuration, VirtualInstant};
pub use timing::TimingParams;
