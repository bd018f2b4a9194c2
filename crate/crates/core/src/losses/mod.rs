//! Alignment objectives.
//!
//! Every loss has two entry points: a `*_node` builder that records the loss
//! on a [`Tape`](crate::grad::Tape) for training, and a plain function over
//! matrices that builds a throwaway tape and returns the value.

mod contrastive;
mod mmd;
mod objective;
mod sdd;

pub use contrastive::{
    clip_contrastive_loss, clip_contrastive_node, gc_loss, ssl_loss, ssl_node, SslDenominator,
};
pub use mmd::{mkmmd_loss, mkmmd_loss_with, mkmmd_node, MmdEstimator};
pub use objective::{
    build_objective, total_loss, EmbeddingVars, Embeddings, LossTerms, ObjectiveConfig,
};
pub use sdd::{
    gamma_divergence, kde_density, sdd_loss, sdd_loss_counted, sdd_node, Divergence, SddConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the total objective `alpha*L_GC + delta*L_MMD + eta*L_SDD`,
/// with `mu` weighting each self-supervised term inside `L_GC`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub delta: f64,
    pub eta: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.1,
            eta: 1.0,
            mu: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("eta", self.eta),
            ("mu", self.mu),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}
