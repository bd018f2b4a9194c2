//! Semantic density distribution loss.
//!
//! For two batches `T` and `R`, every point of `T` gets a kernel density
//! under `T` itself and under `R`. Both profiles are normalized over the
//! points of `T` and compared with KL (or squared error for the ablation).
//! The loss symmetrizes over the two directions.
//!
//! The density of `x` under a batch `T` of size `B` is
//!
//! ```text
//! kappa(x, T) = sum_i exp(-||x - t_i||^2 / (b^2 * s(T))) / (2 B b^2 pi)
//! ```
//!
//! where `s(T)` is the Bessel-corrected batch spread ("relative distance"),
//! or 1 when relative distance is switched off. The profiles are computed
//! in log space; the prefactor cancels after normalization but is kept so
//! intermediate values mean what they say.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::numerics::{batch_variance, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Kl,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SddConfig {
    /// Kernel bandwidth `b`.
    pub bandwidth: f64,
    /// Divide squared distances by the reference batch spread.
    pub use_relative_distance: bool,
    pub divergence: Divergence,
    /// Lower bound on the batch spread before dividing by it.
    pub sigma_floor: f64,
    /// Lower bound on `q_i` before taking its log (KL mode).
    pub prob_floor: f64,
    /// Stop gradients through the batch spread.
    pub detach_sigma: bool,
    /// Stop gradients through the profile normalizers.
    pub detach_normalizer: bool,
}

impl Default for SddConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            use_relative_distance: true,
            divergence: Divergence::Kl,
            sigma_floor: 1e-8,
            prob_floor: 1e-30,
            detach_sigma: false,
            detach_normalizer: false,
        }
    }
}

impl SddConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "sdd {name} must be positive, got {x}"
                )))
            }
        };
        positive("bandwidth", self.bandwidth)?;
        positive("sigma_floor", self.sigma_floor)?;
        positive("prob_floor", self.prob_floor)
    }

    fn min_rows(&self) -> usize {
        if self.use_relative_distance {
            2
        } else {
            1
        }
    }

    fn effective_spread(&self, t: &Matrix) -> Result<f64> {
        if self.use_relative_distance {
            Ok(batch_variance(t)?.max(self.sigma_floor))
        } else {
            Ok(1.0)
        }
    }
}

/// `kappa(x, T)` evaluated directly.
pub fn kde_density(x: &[f64], t: &Matrix, cfg: &SddConfig) -> Result<f64> {
    cfg.validate()?;
    if x.len() != t.cols() {
        return Err(Error::ShapeMismatch {
            op: "kde_density",
            left: (1, x.len()),
            right: t.shape(),
        });
    }
    if t.rows() < cfg.min_rows() {
        return Err(Error::TooFewRows {
            op: "kde_density",
            need: cfg.min_rows(),
            got: t.rows(),
        });
    }
    let b2 = cfg.bandwidth * cfg.bandwidth;
    let spread = cfg.effective_spread(t)?;
    let s: f64 = t
        .row_iter()
        .map(|ti| (-sq_dist(x, ti) / (b2 * spread)).exp())
        .sum();
    Ok(s / (2.0 * t.rows() as f64 * b2 * PI))
}

/// Broadcasts a 1x1 node to an `n x 1` column.
fn broadcast_col(tape: &mut Tape, s: Var, n: usize) -> Result<Var> {
    let ones = tape.leaf(Matrix::filled(n, 1, 1.0));
    tape.matmul(ones, s)
}

/// Log of `kappa(points_i, reference) / sum_j kappa(points_j, reference)`, `n x 1`.
fn log_profile(tape: &mut Tape, points: Var, reference: Var, cfg: &SddConfig) -> Result<Var> {
    let b2 = cfg.bandwidth * cfg.bandwidth;
    let n_ref = tape.value(reference).rows();
    let d = tape.pairwise_sq_dists(points, reference)?;
    let scaled = if cfg.use_relative_distance {
        let mut sigma = tape.batch_variance(reference)?;
        if cfg.detach_sigma {
            sigma = tape.detach(sigma);
        }
        let sigma = tape.floor(sigma, cfg.sigma_floor);
        let denom = tape.scale(sigma, b2);
        tape.div_scalar(d, denom)?
    } else {
        tape.scale(d, 1.0 / b2)
    };
    let logits = tape.neg(scaled);
    let log_sum = tape.logsumexp_rows(logits);
    let log_kappa = tape.add_const(log_sum, -(2.0 * n_ref as f64 * b2 * PI).ln());
    let as_row = tape.transpose(log_kappa);
    let mut log_norm = tape.logsumexp_rows(as_row);
    if cfg.detach_normalizer {
        log_norm = tape.detach(log_norm);
    }
    let n = tape.value(points).rows();
    let norm_col = broadcast_col(tape, log_norm, n)?;
    tape.sub(log_kappa, norm_col)
}

/// `Gamma(T, R)`: divergence between the normalized density profiles of the
/// points of `T` under `T` and under `R`.
pub fn gamma_node(tape: &mut Tape, t: Var, r: Var, cfg: &SddConfig) -> Result<Var> {
    let (ts, rs) = (tape.value(t).shape(), tape.value(r).shape());
    if ts != rs {
        return Err(Error::ShapeMismatch {
            op: "gamma_divergence",
            left: ts,
            right: rs,
        });
    }
    if ts.0 < 2 {
        return Err(Error::TooFewRows {
            op: "gamma_divergence",
            need: 2,
            got: ts.0,
        });
    }
    let log_p = log_profile(tape, t, t, cfg)?;
    let log_q = log_profile(tape, t, r, cfg)?;
    let p = tape.exp(log_p);
    match cfg.divergence {
        Divergence::Kl => {
            let log_q = tape.floor(log_q, cfg.prob_floor.ln());
            let diff = tape.sub(log_p, log_q)?;
            let terms = tape.mul(p, diff)?;
            Ok(tape.sum(terms))
        }
        Divergence::Mse => {
            let q = tape.exp(log_q);
            let diff = tape.sub(p, q)?;
            let sq = tape.square(diff);
            Ok(tape.sum(sq))
        }
    }
}

/// Symmetrized loss `(Gamma(U, V) + Gamma(V, U)) / 2`.
pub fn sdd_node(tape: &mut Tape, u: Var, v: Var, cfg: &SddConfig) -> Result<Var> {
    cfg.validate()?;
    let a = gamma_node(tape, u, v, cfg)?;
    let b = gamma_node(tape, v, u, cfg)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

pub fn gamma_divergence(t: &Matrix, r: &Matrix, cfg: &SddConfig) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let (tt, rr) = (tape.leaf(t.clone()), tape.leaf(r.clone()));
    let g = gamma_node(&mut tape, tt, rr, cfg)?;
    Ok(tape.scalar(g))
}

pub fn sdd_loss(u: &Matrix, v: &Matrix, cfg: &SddConfig) -> Result<f64> {
    sdd_loss_counted(u, v, cfg).map(|(l, _)| l)
}

/// Loss value plus the number of pairwise kernel evaluations it took.
pub fn sdd_loss_counted(u: &Matrix, v: &Matrix, cfg: &SddConfig) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let (uu, vv) = (tape.leaf(u.clone()), tape.leaf(v.clone()));
    let l = sdd_node(&mut tape, uu, vv, cfg)?;
    Ok((tape.scalar(l), tape.pair_evaluations()))
}
