//! Batch representativeness: how well a finite batch stands in for its
//! source distribution, measured with a soft Parzen window.
//!
//! Two batches `T`, `R` drawn from the same distribution are compared by
//!
//! ```text
//! D = 1/B sum_i (k(t_i, T) - k(t_i, R))^2 + 1/B sum_i (k(r_i, R) - k(r_i, T))^2
//! k(x, T) = sum_i exp(-||x - t_i||^2 / s(T)) / (B pi)
//! ```
//!
//! with `s(T)` the Bessel-corrected batch spread. Note that this window has
//! no bandwidth and a different prefactor from the SDD density; the two are
//! kept separate on purpose.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{batch_variance, mix_seed, sq_dist, Matrix, Rng};
use crate::par::{map_indices, Execution};

/// Spread floor used when a batch collapses to a point.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Soft Parzen window density of `x` under batch `t`.
pub fn parzen_density(x: &[f64], t: &Matrix, sigma_floor: f64) -> Result<f64> {
    let spread = batch_variance(t)?.max(sigma_floor);
    Ok(parzen_with_spread(x, t, spread))
}

fn parzen_with_spread(x: &[f64], t: &Matrix, spread: f64) -> f64 {
    let s: f64 = t
        .row_iter()
        .map(|ti| (-sq_dist(x, ti) / spread).exp())
        .sum();
    s / (t.rows() as f64 * PI)
}

/// Gap `D` between two equal-size batches.
pub fn representativeness_gap(t: &Matrix, r: &Matrix) -> Result<f64> {
    if t.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            op: "representativeness_gap",
            left: t.shape(),
            right: r.shape(),
        });
    }
    let b = t.rows();
    if b < 2 {
        return Err(Error::TooFewRows {
            op: "representativeness_gap",
            need: 2,
            got: b,
        });
    }
    let st = batch_variance(t)?.max(SIGMA_FLOOR);
    let sr = batch_variance(r)?.max(SIGMA_FLOOR);
    let one_side = |pts: &Matrix, own: &Matrix, s_own: f64, other: &Matrix, s_other: f64| -> f64 {
        pts.row_iter()
            .map(|x| {
                let d = parzen_with_spread(x, own, s_own) - parzen_with_spread(x, other, s_other);
                d * d
            })
            .sum::<f64>()
            / b as f64
    };
    Ok(one_side(t, t, st, r, sr) + one_side(r, r, sr, t, st))
}

/// Distribution the compared batches are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceDistribution {
    /// Uniform on the unit cube.
    #[default]
    Uniform,
    /// Four isotropic Gaussian bumps (std 0.1) with centers uniform in the unit cube.
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub reference: ReferenceDistribution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2, 4, 8, 16, 32, 64, 128, 256],
            dims: vec![2, 16, 64],
            trials: 50,
            seed: 0,
            reference: ReferenceDistribution::Uniform,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.dims.is_empty() {
            return Err(Error::InvalidConfig("sweep needs sizes and dims".into()));
        }
        if self.sizes.iter().any(|&s| s < 2) {
            return Err(Error::InvalidConfig("sweep sizes must be >= 2".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "sweep sizes must be strictly ascending".into(),
            ));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidConfig("sweep dims must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("sweep trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// One `(size, dim)` cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub dim: usize,
    pub mean_d: f64,
    pub std_d: f64,
    /// `mean_d` relative to the smallest size at the same dim.
    pub normalized_d: f64,
}

fn draw_batch(
    rng: &mut Rng,
    size: usize,
    dim: usize,
    reference: ReferenceDistribution,
    centers: &Matrix,
) -> Matrix {
    match reference {
        ReferenceDistribution::Uniform => Matrix::from_fn(size, dim, |_, _| rng.uniform()),
        ReferenceDistribution::GaussianMixture => {
            let mut m = Matrix::zeros(size, dim);
            for i in 0..size {
                let c = rng.below(centers.rows());
                for k in 0..dim {
                    m[(i, k)] = centers[(c, k)] + 0.1 * rng.normal();
                }
            }
            m
        }
    }
}

/// Runs the size sweep with the default execution policy.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    sweep_with(Execution::auto(), cfg)
}

/// Runs every `(size, dim, trial)` independently from its own derived seed,
/// so the table does not depend on how trials are scheduled.
pub fn sweep_with(exec: Execution, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.sizes.len() * cfg.dims.len());
    for &dim in &cfg.dims {
        let mut center_rng = Rng::new(mix_seed(cfg.seed, 0xC0FF_EE00 ^ dim as u64));
        let centers = Matrix::from_fn(4, dim, |_, _| center_rng.uniform());
        let mut baseline = None;
        for &size in &cfg.sizes {
            let cell = mix_seed(mix_seed(cfg.seed, size as u64), dim as u64);
            let gaps = map_indices(exec, cfg.trials, |trial| {
                let mut rng = Rng::new(mix_seed(cell, trial as u64));
                let t = draw_batch(&mut rng, size, dim, cfg.reference, &centers);
                let r = draw_batch(&mut rng, size, dim, cfg.reference, &centers);
                representativeness_gap(&t, &r)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            let n = gaps.len() as f64;
            let mean_d = gaps.iter().sum::<f64>() / n;
            let std_d = if gaps.len() > 1 {
                (gaps.iter().map(|g| (g - mean_d).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let base = *baseline.get_or_insert(mean_d);
            rows.push(SweepRow {
                size,
                dim,
                mean_d,
                std_d,
                normalized_d: mean_d / base,
            });
        }
    }
    rows.sort_by_key(|r| (r.size, r.dim));
    Ok(rows)
}

/// Writes the sweep table as CSV with header `size,dim,mean_D,std_D,normalized_D`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "size,dim,mean_D,std_D,normalized_D")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.size, r.dim, r.mean_d, r.std_d, r.normalized_d
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_batches_have_zero_gap() {
        let mut rng = Rng::new(1);
        let t = Matrix::from_fn(10, 3, |_, _| rng.uniform());
        assert_eq!(representativeness_gap(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn two_point_hand_oracle() {
        // t = {0, 1}: s(T) = 0.5; r = {0, 2}: s(R) = 2
        let t = Matrix::from_rows(&[[0.0], [1.0]]);
        let r = Matrix::from_rows(&[[0.0], [2.0]]);
        let k = |x: f64, pts: [f64; 2], s: f64| {
            ((-(x - pts[0]).powi(2) / s).exp() + (-(x - pts[1]).powi(2) / s).exp()) / (2.0 * PI)
        };
        let (tp, rp) = ([0.0, 1.0], [0.0, 2.0]);
        let first = ((k(0.0, tp, 0.5) - k(0.0, rp, 2.0)).powi(2)
            + (k(1.0, tp, 0.5) - k(1.0, rp, 2.0)).powi(2))
            / 2.0;
        let second = ((k(0.0, rp, 2.0) - k(0.0, tp, 0.5)).powi(2)
            + (k(2.0, rp, 2.0) - k(2.0, tp, 0.5)).powi(2))
            / 2.0;
        let got = representativeness_gap(&t, &r).unwrap();
        assert!((got - (first + second)).abs() < 1e-12);
    }

    #[test]
    fn gap_is_symmetric_and_nonnegative() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let t = Matrix::from_fn(6, 4, |_, _| rng.uniform());
            let r = Matrix::from_fn(6, 4, |_, _| rng.uniform());
            let a = representativeness_gap(&t, &r).unwrap();
            let b = representativeness_gap(&r, &t).unwrap();
            assert!(a >= 0.0);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parzen_density_coincident_points() {
        let t = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let k = parzen_density(&[1.0, 2.0], &t, SIGMA_FLOOR).unwrap();
        assert!((k - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = Matrix::zeros(3, 2);
        assert!(representativeness_gap(&a, &Matrix::zeros(3, 3)).is_err());
        assert!(representativeness_gap(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).is_err());
        let bad = SweepConfig {
            sizes: vec![4, 2],
            ..SweepConfig::default()
        };
        assert!(sweep(&bad).is_err());
        let bad = SweepConfig {
            trials: 0,
            ..SweepConfig::default()
        };
        assert!(sweep(&bad).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_schedule_independent() {
        let cfg = SweepConfig {
            sizes: vec![2, 8, 32],
            dims: vec![3],
            trials: 1,
            seed: 9,
            ..SweepConfig::default()
        };
        let a = sweep_with(Execution::Sequential, &cfg).unwrap();
        let b = sweep_with(Execution::Parallel, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, sweep(&cfg).unwrap());
        assert_eq!(a[0].normalized_d, 1.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let rows = vec![SweepRow {
            size: 2,
            dim: 3,
            mean_d: 0.5,
            std_d: 0.25,
            normalized_d: 1.0,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "size,dim,mean_D,std_D,normalized_D\n2,3,5e-1,2.5e-1,1e0\n"
        );
    }
}
