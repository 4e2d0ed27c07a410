//! Multi-party conversation disentanglement with bi-level contrastive
//! learning.
//!
//! Utterances are encoded by a hierarchical BiLSTM, trained with
//! utterance-level and session-level contrastive objectives (supervised, or
//! unsupervised through an EM loop over K-Means clusterings), and grouped
//! into sessions by K-Means with a learned or heuristic number of clusters.

pub mod autodiff;
pub mod cli;
pub mod clustering;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod kpredictor;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
