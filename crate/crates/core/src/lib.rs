//! Free-trial adopter selection.
//!
//! A simulated recommender (rating MF, BPR ranker, page-view exposure reward)
//! paired with a tree-structured REINFORCE agent that learns which users to
//! hand promoted items to, plus static baselines and the experiment harness
//! used to compare them.
//!
//! Module map:
//! - [`dataset`]: rating logs, filtering, splitting, low-exposure construction.
//! - [`factorization`]: rating MF (user/item embeddings) and the BPR ranker.
//! - [`environment`]: candidate sets, top-K lists, trial application, reward.
//! - [`state_tracker`]: reward one-hot encoding and the SRU state recurrence.
//! - [`action_tree`]: balanced PCA clustering tree over users and path sampling.
//! - [`agent`]: node policies, user filter, returns, REINFORCE and training.
//! - [`harness`]: baselines, metrics, experiment runners, config and CLI.

pub mod action_tree;
pub mod agent;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod factorization;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod state_tracker;

mod binio;

pub use error::{Error, Result};
