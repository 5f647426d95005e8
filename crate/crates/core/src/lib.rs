//! Causal rule forests.
//!
//! Layers of honest causal trees re-encode covariates as leaf memberships;
//! a final causal tree over the last encoding yields effect estimates whose
//! leaves expand into Boolean rules over the original covariates.

pub mod causal_tree;
pub mod cli;
pub mod crf;
pub mod data;
pub mod metrics;
pub mod rules;
pub mod seeds;

pub use causal_tree::{fit_causal_tree, prune_tree, CausalTree, TreeParams};
pub use crf::{fit_crf_ct, CrfConfig, CrfModel};
pub use data::{Dataset, Frame, Schema};
