//! Joint deep clustering with cluster-local expert classifiers.
//!
//! An autoencoder learns a latent space in which points are softly assigned
//! to `k` centroids with a Student-t kernel. The assignment is sharpened into
//! a self-training target, kept balanced with a Hellinger penalty, and used to
//! route points to `k` small expert networks trained on stochastically
//! sampled cohorts. Prediction mixes the experts with the soft assignment.
//!
//! Besides training, the crate ships the evaluation metrics used to judge
//! such models (AUC, F1, silhouette, HTFD) and calculators for the
//! margin-based generalization bounds of partitioned classifiers.
//!
//! Modules:
//!
//! - [`nn`]: dense networks with explicit forward/backward passes.
//! - [`clustering`]: soft assignment, target distribution, KL and balance losses, k-means.
//! - [`experts`]: expert ensemble, cohort sampling, weighted cross-entropy, prediction.
//! - [`trainer`]: pretraining, the joint loop, early stopping and fine-tuning.
//! - [`metrics`]: Welch t-test, HTFD, silhouette, AUC, F1, adjusted Rand index.
//! - [`bounds`]: margin losses and bound calculators.
//! - [`data`]: CSV ingestion, standardization, splitting, synthetic generators.
//! - [`checkpoint`]: text checkpoint format for trained models.
//! - [`cli`]: the command-line surface.

// `!(x > 0.0)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod error;
pub mod experts;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
