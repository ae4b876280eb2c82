//! Low-rank informed sparse fine-tuning: principal-weight selection, masked
//! AdamW with compacted state, spectral diagnostics and a two-layer toy
//! testbed, plus the experiment harness that drives them.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod masking;
pub mod optimizer;
pub mod rng;
pub mod toymodel;

pub use error::{LiftError, Result};
pub use linalg::{Matrix, RankSelection, RankVariant, SvdFactors};
pub use masking::{BudgetSpec, Mask, SelectionStrategy};
pub use optimizer::{AdamHyperparams, MaskInterval, SparseOptimizerState};
