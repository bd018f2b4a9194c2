use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::kernels::{median_sq_dist, BaseKernel, KernelSpec};
use crate::losses::{
    clip_contrastive_node, mkmmd_node, sdd_node, ssl_node, LossWeights, MmdEstimator, SddConfig,
    SslDenominator,
};
use crate::numerics::Matrix;

/// Everything that shapes the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub sdd: SddConfig,
    pub mmd_estimator: MmdEstimator,
    pub ssl_denominator: SslDenominator,
    /// Base kernels of the MK-MMD combination.
    pub kernels: Vec<BaseKernel>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sdd: SddConfig::default(),
            mmd_estimator: MmdEstimator::Biased,
            ssl_denominator: SslDenominator::Literal,
            kernels: vec![
                BaseKernel::Gaussian { gamma_sq: None },
                BaseKernel::Polynomial {
                    coef0: 1.0,
                    degree: 2,
                },
            ],
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sdd.validate()?;
        if self.kernels.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one MMD kernel is required".into(),
            ));
        }
        for k in &self.kernels {
            k.resolve(|| 1.0).validate()?;
        }
        Ok(())
    }

    /// Resolves median-heuristic bandwidths against the pooled batch.
    pub fn resolve_kernels(&self, u: &Matrix, v: &Matrix) -> Result<Vec<KernelSpec>> {
        let mut median = None;
        self.kernels
            .iter()
            .map(|k| {
                let spec = match k {
                    BaseKernel::Gaussian { gamma_sq: None } => {
                        let m = match median {
                            Some(m) => m,
                            None => {
                                let m = median_sq_dist(u, v)?;
                                median = Some(m);
                                m
                            }
                        };
                        k.resolve(|| m)
                    }
                    _ => k.resolve(|| unreachable!()),
                };
                Ok(spec)
            })
            .collect()
    }
}

/// Embedding nodes of one composed batch. The first `n_paired` rows of `u`
/// and `v` are aligned pairs; all rows take part in the distribution losses.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub u: Var,
    pub v: Var,
    pub u_aug: Option<Var>,
    pub v_aug: Option<Var>,
    pub n_paired: usize,
}

/// Plain-matrix counterpart of [`EmbeddingVars`].
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub u: Matrix,
    pub v: Matrix,
    pub u_aug: Option<Matrix>,
    pub v_aug: Option<Matrix>,
    pub n_paired: usize,
}

/// Each loss component and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub cl: T,
    pub ssl_u: T,
    pub ssl_v: T,
    pub gc: T,
    pub mmd: T,
    pub sdd: T,
    pub total: T,
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<f64> {
        LossTerms {
            cl: tape.scalar(self.cl),
            ssl_u: tape.scalar(self.ssl_u),
            ssl_v: tape.scalar(self.ssl_v),
            gc: tape.scalar(self.gc),
            mmd: tape.scalar(self.mmd),
            sdd: tape.scalar(self.sdd),
            total: tape.scalar(self.total),
        }
    }
}

impl LossTerms<f64> {
    pub fn zero() -> Self {
        Self {
            cl: 0.0,
            ssl_u: 0.0,
            ssl_v: 0.0,
            gc: 0.0,
            mmd: 0.0,
            sdd: 0.0,
            total: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.cl, self.ssl_u, self.ssl_v, self.gc, self.mmd, self.sdd, self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

fn weighted(tape: &mut Tape, acc: Var, term: Var, w: f64) -> Result<Var> {
    let t = tape.scale(term, w);
    tape.add(acc, t)
}

/// Records `alpha*L_GC + delta*L_MMD + eta*L_SDD` and each component.
///
/// `tau` is the 1x1 temperature node and `beta_logits` the `1 x d` free
/// kernel weights (softmaxed here).
pub fn build_objective(
    tape: &mut Tape,
    emb: &EmbeddingVars,
    tau: Var,
    beta_logits: Var,
    cfg: &ObjectiveConfig,
) -> Result<LossTerms<Var>> {
    let (us, vs) = (tape.value(emb.u).shape(), tape.value(emb.v).shape());
    if us != vs {
        return Err(Error::ShapeMismatch {
            op: "objective",
            left: us,
            right: vs,
        });
    }
    if emb.n_paired > us.0 {
        return Err(Error::InvalidConfig(format!(
            "{} paired rows in a batch of {}",
            emb.n_paired, us.0
        )));
    }
    let w = cfg.weights;

    let cl = if emb.n_paired == 0 {
        // pairless batches are routine in unsupervised runs; no per-step warning
        tape.leaf(Matrix::scalar(0.0))
    } else {
        let pu = tape.slice_rows(emb.u, 0, emb.n_paired)?;
        let pv = tape.slice_rows(emb.v, 0, emb.n_paired)?;
        clip_contrastive_node(tape, pu, pv, tau)?
    };

    let ssl_u = match emb.u_aug {
        Some(aug) => ssl_node(tape, emb.u, aug, tau, cfg.ssl_denominator)?,
        None => tape.leaf(Matrix::scalar(0.0)),
    };
    let ssl_v = match emb.v_aug {
        Some(aug) => ssl_node(tape, emb.v, aug, tau, cfg.ssl_denominator)?,
        None => tape.leaf(Matrix::scalar(0.0)),
    };
    let gc = weighted(tape, cl, ssl_u, w.mu)?;
    let gc = weighted(tape, gc, ssl_v, w.mu)?;

    let specs = cfg.resolve_kernels(tape.value(emb.u), tape.value(emb.v))?;
    let beta = tape.row_softmax(beta_logits);
    let mmd = mkmmd_node(tape, &specs, beta, emb.u, emb.v, cfg.mmd_estimator)?;
    let sdd = sdd_node(tape, emb.u, emb.v, &cfg.sdd)?;

    let total = tape.scale(gc, w.alpha);
    let total = weighted(tape, total, mmd, w.delta)?;
    let total = weighted(tape, total, sdd, w.eta)?;
    Ok(LossTerms {
        cl,
        ssl_u,
        ssl_v,
        gc,
        mmd,
        sdd,
        total,
    })
}

/// Evaluates the total objective and its components on fixed embeddings.
pub fn total_loss(
    emb: &Embeddings,
    tau: f64,
    beta_logits: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<LossTerms<f64>> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let vars = EmbeddingVars {
        u: tape.leaf(emb.u.clone()),
        v: tape.leaf(emb.v.clone()),
        u_aug: emb.u_aug.as_ref().map(|m| tape.leaf(m.clone())),
        v_aug: emb.v_aug.as_ref().map(|m| tape.leaf(m.clone())),
        n_paired: emb.n_paired,
    };
    let tau = tape.leaf(Matrix::scalar(tau));
    let beta = tape.leaf(Matrix::new(1, beta_logits.len(), beta_logits.to_vec())?);
    let terms = build_objective(&mut tape, &vars, tau, beta, cfg)?;
    Ok(terms.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MultiKernel;
    use crate::losses::{clip_contrastive_loss, mkmmd_loss, sdd_loss, ssl_loss};
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-2.0, 2.0))
    }

    fn sample(seed: u64) -> Embeddings {
        let mut rng = Rng::new(seed);
        Embeddings {
            u: random(8, 4, &mut rng),
            v: random(8, 4, &mut rng),
            u_aug: Some(random(8, 4, &mut rng)),
            v_aug: Some(random(8, 4, &mut rng)),
            n_paired: 3,
        }
    }

    #[test]
    fn recomposes_from_components() {
        let emb = sample(1);
        let cfg = ObjectiveConfig {
            weights: LossWeights {
                alpha: 0.7,
                delta: 0.3,
                eta: 1.9,
                mu: 0.45,
            },
            ..ObjectiveConfig::default()
        };
        let logits = [0.2, -0.3];
        let tau = 0.2;
        let terms = total_loss(&emb, tau, &logits, &cfg).unwrap();

        let cl =
            clip_contrastive_loss(&emb.u.slice_rows(0, 3), &emb.v.slice_rows(0, 3), tau).unwrap();
        let su = ssl_loss(
            &emb.u,
            emb.u_aug.as_ref().unwrap(),
            tau,
            SslDenominator::Literal,
        )
        .unwrap();
        let sv = ssl_loss(
            &emb.v,
            emb.v_aug.as_ref().unwrap(),
            tau,
            SslDenominator::Literal,
        )
        .unwrap();
        let specs = cfg.resolve_kernels(&emb.u, &emb.v).unwrap();
        let mk = MultiKernel::new(specs, logits.to_vec()).unwrap();
        let mmd = mkmmd_loss(&mk, &emb.u, &emb.v).unwrap();
        let sdd = sdd_loss(&emb.u, &emb.v, &cfg.sdd).unwrap();
        let want = 0.7 * (cl + 0.45 * su + 0.45 * sv) + 0.3 * mmd + 1.9 * sdd;
        assert!((terms.total - want).abs() < 1e-12);
        assert!((terms.cl - cl).abs() < 1e-12);
        assert!((terms.mmd - mmd).abs() < 1e-12);
        assert!((terms.sdd - sdd).abs() < 1e-12);
    }

    #[test]
    fn clip_only_weights_reduce_to_contrastive() {
        let emb = sample(2);
        let cfg = ObjectiveConfig {
            weights: LossWeights {
                alpha: 1.0,
                delta: 0.0,
                eta: 0.0,
                mu: 0.0,
            },
            ..ObjectiveConfig::default()
        };
        let t = total_loss(&emb, 0.1, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(t.total, t.cl);
    }

    #[test]
    fn unsupervised_weights_ignore_pairs() {
        let mut emb = sample(3);
        let cfg = ObjectiveConfig {
            weights: LossWeights {
                alpha: 0.0,
                ..LossWeights::default()
            },
            ..ObjectiveConfig::default()
        };
        let with_pairs = total_loss(&emb, 0.1, &[0.0, 0.0], &cfg).unwrap();
        emb.n_paired = 0;
        let without = total_loss(&emb, 0.1, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(without.cl, 0.0);
        assert!((with_pairs.total - without.total).abs() < 1e-12);
    }

    #[test]
    fn bad_paired_count_rejected() {
        let mut emb = sample(4);
        emb.n_paired = 9;
        assert!(total_loss(&emb, 0.1, &[0.0, 0.0], &ObjectiveConfig::default()).is_err());
    }
}
