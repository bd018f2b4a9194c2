//! Gaussian and polynomial base kernels and their learnable convex combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::numerics::{dot, pairwise_sq_dists, Matrix};

/// Floor on the median-heuristic bandwidth so collapsed batches stay finite.
pub const MIN_GAMMA_SQ: f64 = 1e-12;

/// A fully specified base kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-||x - y||^2 / (2 gamma_sq))`
    Gaussian { gamma_sq: f64 },
    /// `(<x, y> + coef0)^degree`
    Polynomial { coef0: f64, degree: u32 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { gamma_sq } if !(gamma_sq > 0.0 && gamma_sq.is_finite()) => {
                Err(Error::InvalidConfig(format!(
                    "gaussian gamma_sq must be positive, got {gamma_sq}"
                )))
            }
            KernelSpec::Polynomial { degree: 0, .. } => Err(Error::InvalidConfig(
                "polynomial degree must be >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Kernel value for a single pair of rows.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { gamma_sq } => {
                let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d / (2.0 * gamma_sq)).exp()
            }
            KernelSpec::Polynomial { coef0, degree } => (dot(x, y) + coef0).powi(degree as i32),
        }
    }
}

/// A base kernel as configured, with the Gaussian bandwidth possibly left to
/// the median heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BaseKernel {
    /// `gamma_sq = None` picks the median pairwise squared distance of the
    /// pooled batch, recomputed per batch and treated as a constant.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_sq: Option<f64>,
    },
    Polynomial {
        coef0: f64,
        degree: u32,
    },
}

impl BaseKernel {
    pub fn resolve(&self, median_sq_dist: impl FnOnce() -> f64) -> KernelSpec {
        match *self {
            BaseKernel::Gaussian { gamma_sq: Some(g) } => KernelSpec::Gaussian { gamma_sq: g },
            BaseKernel::Gaussian { gamma_sq: None } => KernelSpec::Gaussian {
                gamma_sq: median_sq_dist().max(MIN_GAMMA_SQ),
            },
            BaseKernel::Polynomial { coef0, degree } => KernelSpec::Polynomial { coef0, degree },
        }
    }
}

/// `k = sum_i beta_i k_i` with `beta = softmax(beta_logits)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiKernel {
    pub specs: Vec<KernelSpec>,
    pub beta_logits: Vec<f64>,
}

impl MultiKernel {
    pub fn new(specs: Vec<KernelSpec>, beta_logits: Vec<f64>) -> Result<Self> {
        let mk = Self { specs, beta_logits };
        mk.validate()?;
        Ok(mk)
    }

    /// Equal weights over `specs`.
    pub fn uniform(specs: Vec<KernelSpec>) -> Result<Self> {
        let d = specs.len();
        Self::new(specs, vec![0.0; d])
    }

    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::InvalidConfig(
                "multi-kernel needs at least one kernel".into(),
            ));
        }
        if self.specs.len() != self.beta_logits.len() {
            return Err(Error::InvalidConfig(format!(
                "{} kernels but {} beta logits",
                self.specs.len(),
                self.beta_logits.len()
            )));
        }
        self.specs.iter().try_for_each(KernelSpec::validate)
    }

    pub fn betas(&self) -> Vec<f64> {
        softmax(&self.beta_logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn check_cols(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "gram",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Gram matrix `G[i][j] = k(a_i, b_j)`.
pub fn gram(kernel: &KernelSpec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(a, b)?;
    Ok(match *kernel {
        KernelSpec::Gaussian { gamma_sq } => {
            pairwise_sq_dists(a, b)?.map(|d| (-d / (2.0 * gamma_sq)).exp())
        }
        KernelSpec::Polynomial { coef0, degree } => a
            .matmul(&b.transpose())?
            .map(|x| (x + coef0).powi(degree as i32)),
    })
}

/// Weighted Gram matrix of a [`MultiKernel`].
pub fn multi_gram(mk: &MultiKernel, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    mk.validate()?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (spec, beta) in mk.specs.iter().zip(mk.betas()) {
        out.axpy(beta, &gram(spec, a, b)?)?;
    }
    Ok(out)
}

/// Median of the off-diagonal pairwise squared distances of `u` stacked on `v`.
pub fn median_sq_dist(u: &Matrix, v: &Matrix) -> Result<f64> {
    let pooled = u.vstack(v)?;
    let d = pairwise_sq_dists(&pooled, &pooled)?;
    let n = pooled.rows();
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(d[(i, j)]);
        }
    }
    if upper.is_empty() {
        return Ok(0.0);
    }
    upper.sort_by(f64::total_cmp);
    let m = upper.len();
    Ok(if m % 2 == 1 {
        upper[m / 2]
    } else {
        0.5 * (upper[m / 2 - 1] + upper[m / 2])
    })
}

/// Gram matrix node for one kernel.
pub fn gram_node(tape: &mut Tape, kernel: &KernelSpec, a: Var, b: Var) -> Result<Var> {
    match *kernel {
        KernelSpec::Gaussian { gamma_sq } => {
            let d = tape.pairwise_sq_dists(a, b)?;
            let s = tape.scale(d, -1.0 / (2.0 * gamma_sq));
            Ok(tape.exp(s))
        }
        KernelSpec::Polynomial { coef0, degree } => {
            let bt = tape.transpose(b);
            let ip = tape.matmul(a, bt)?;
            let shifted = tape.add_const(ip, coef0);
            Ok(tape.powi(shifted, degree as i32))
        }
    }
}

/// Weighted Gram node; `beta` is a `1 x d` node of (already normalized) weights.
pub fn multi_gram_node(
    tape: &mut Tape,
    specs: &[KernelSpec],
    beta: Var,
    a: Var,
    b: Var,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, spec) in specs.iter().enumerate() {
        let g = gram_node(tape, spec, a, b)?;
        let w = tape.element(beta, 0, i)?;
        let term = tape.mul_scalar(g, w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidConfig("multi-kernel needs at least one kernel".into()))
}
