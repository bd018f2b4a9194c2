use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::kernels::{multi_gram_node, MultiKernel};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// Squared distance of the empirical mean embeddings (keeps `i == j` terms).
    #[default]
    Biased,
    /// Drops the diagonal of each Gram block.
    Unbiased,
}

fn block_mean(tape: &mut Tape, k: Var, estimator: MmdEstimator) -> Result<Var> {
    let n = tape.value(k).rows();
    match estimator {
        MmdEstimator::Biased => Ok(tape.mean(k)),
        MmdEstimator::Unbiased => {
            if n < 2 {
                return Err(Error::TooFewRows {
                    op: "unbiased mmd",
                    need: 2,
                    got: n,
                });
            }
            let total = tape.sum(k);
            let d = tape.diag(k)?;
            let dsum = tape.sum(d);
            let off = tape.sub(total, dsum)?;
            Ok(tape.scale(off, 1.0 / (n * (n - 1)) as f64))
        }
    }
}

/// MK-MMD between two equal-size batches; `beta` is a `1 x d` weight node.
pub fn mkmmd_node(
    tape: &mut Tape,
    mk_specs: &[crate::kernels::KernelSpec],
    beta: Var,
    u: Var,
    v: Var,
    estimator: MmdEstimator,
) -> Result<Var> {
    let (us, vs) = (tape.value(u).shape(), tape.value(v).shape());
    if us != vs {
        return Err(Error::ShapeMismatch {
            op: "mkmmd",
            left: us,
            right: vs,
        });
    }
    if us.0 == 0 {
        return Err(Error::TooFewRows {
            op: "mkmmd",
            need: 1,
            got: 0,
        });
    }
    let kuu = multi_gram_node(tape, mk_specs, beta, u, u)?;
    let kvv = multi_gram_node(tape, mk_specs, beta, v, v)?;
    let kuv = multi_gram_node(tape, mk_specs, beta, u, v)?;
    let muu = block_mean(tape, kuu, estimator)?;
    let mvv = block_mean(tape, kvv, estimator)?;
    let muv = match estimator {
        MmdEstimator::Biased => tape.mean(kuv),
        MmdEstimator::Unbiased => block_mean(tape, kuv, estimator)?,
    };
    let s = tape.add(muu, mvv)?;
    let cross = tape.scale(muv, 2.0);
    tape.sub(s, cross)
}

/// Biased (V-statistic) MK-MMD value.
pub fn mkmmd_loss(mk: &MultiKernel, u: &Matrix, v: &Matrix) -> Result<f64> {
    mkmmd_loss_with(mk, u, v, MmdEstimator::Biased)
}

pub fn mkmmd_loss_with(mk: &MultiKernel, u: &Matrix, v: &Matrix, est: MmdEstimator) -> Result<f64> {
    mk.validate()?;
    let mut t = Tape::new();
    let (uu, vv) = (t.leaf(u.clone()), t.leaf(v.clone()));
    let beta = t.leaf(Matrix::new(1, mk.specs.len(), mk.betas())?);
    let l = mkmmd_node(&mut t, &mk.specs, beta, uu, vv, est)?;
    Ok(t.scalar(l))
}
