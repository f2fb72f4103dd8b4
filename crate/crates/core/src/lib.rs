//! Literature mining for microbial-protein production.
//!
//! The crate is organised along the pipeline a single analysis walks through:
//!
//! - [`search`]: keyword-expanded bibliographic search, lexical relevance
//!   scoring and full-text retrieval.
//! - [`document`]: reference stripping, text cleanup, token estimation and
//!   start/end splitting of oversized papers.
//! - [`agent`]: single-stage and two-stage LLM extraction of the four
//!   canonical fields behind a pluggable chat backend.
//! - [`curation`]: labelled dataset construction, balance checks,
//!   strain-stratified splitting and chat-format JSONL export.
//! - [`eval`]: embedding cosine scoring, aggregation, temperature sweeps and
//!   variant comparison.
//! - [`tox`]: CAS normalisation and mutagenicity screening of an organism's
//!   compound inventory.
//! - [`service`]: job orchestration, persistence and the HTTP API.
//!
//! Shared vocabulary lives in [`domain`].

pub mod agent;
pub mod cache;
pub mod config;
pub mod curation;
pub mod document;
pub mod domain;
pub mod eval;
pub mod net;
pub mod search;
pub mod service;
pub mod tox;

pub use domain::{
    AgentVariant, ExtractionOutcome, ExtractionRecord, ParseError, Strategy, StrainQuery,
    NAN_TOKEN, NEGATIVE_SENTINEL, ROLE_MESSAGE,
};
