//! Toolkit for predicting whether an online content dispute will be
//! escalated to third-party mediation.
//!
//! The pipeline runs in stages, each available as a library module and as a
//! `disputelab` CLI subcommand:
//!
//! - [`corpus`]: conversation data model, line-delimited corpus IO, edit
//!   summary merging, and quality filters.
//! - [`dataset`]: length matching between classes and train/validation/test
//!   splits.
//! - [`features`]: per-utterance linguistic markers (politeness,
//!   collaboration, sentiment, toxicity) aggregated to per-conversation
//!   mean and gradient values.
//! - [`linear`]: logistic regression with L1/L2 regularization and grid
//!   search, plus a bag-of-words variant.
//! - [`ndiff`]: minimal reverse-mode differentiation engine (tensor ops,
//!   BiLSTM, focal loss, Adam, dropout).
//! - [`models`]: the three neural classifiers over conversations, Monte
//!   Carlo dropout prediction, and per-prefix traces.
//! - [`eval`]: PR-AUC, break-even F1, baselines, permutation tests, and
//!   early-estimation curves.
//! - [`pipeline`]: the experiment stages behind each CLI subcommand, with
//!   hash-checked on-disk artifacts.
//! - [`config`] / [`report`] / [`serve`]: experiment configuration,
//!   CSV/SVG artifacts, and the JSON-over-HTTP scoring endpoint.
//! - [`synth`]: a seeded synthetic corpus generator with planted escalation
//!   signals, used by the test suite and handy for demos.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod features;
pub(crate) mod ioutil;
pub mod linear;
pub mod models;
pub mod ndiff;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod serve;
pub mod synth;
pub mod text;

pub use corpus::{Conversation, FilterConfig, Label, Utterance, UtteranceKind};
