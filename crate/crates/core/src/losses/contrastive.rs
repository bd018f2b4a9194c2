use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::numerics::Matrix;

/// Which rows make up the softmax denominator of the self-supervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslDenominator {
    /// Sum over the original batch rows `z_j`, self term included, positive
    /// excluded.
    #[default]
    Literal,
    /// Positive plus every other original row (the usual SimCLR form).
    SimClr,
}

fn check_same(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

/// Symmetric InfoNCE over the cosine similarities of `n` aligned pairs,
/// divided by the temperature node `tau` (1x1).
///
/// With no pairs the loss is a constant zero.
pub fn clip_contrastive_node(tape: &mut Tape, u: Var, v: Var, tau: Var) -> Result<Var> {
    check_same(tape, u, v, "clip_contrastive")?;
    let n = tape.value(u).rows();
    if n == 0 {
        log::warn!("contrastive loss over an empty paired subset; contributing 0");
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }
    let sim = tape.cosine_similarity(u, v)?;
    let logits = tape.div_scalar(sim, tau)?;
    let d = tape.diag(logits)?;
    let lse_u = tape.logsumexp_rows(logits);
    let lt = tape.transpose(logits);
    let lse_v = tape.logsumexp_rows(lt);
    let a = tape.sum(lse_u);
    let b = tape.sum(lse_v);
    let pos = tape.sum(d);
    let pos2 = tape.scale(pos, 2.0);
    let ab = tape.add(a, b)?;
    let total = tape.sub(ab, pos2)?;
    Ok(tape.scale(total, 1.0 / (2 * n) as f64))
}

/// Self-supervised contrastive loss of `z` against its augmented views `z_pos`.
pub fn ssl_node(
    tape: &mut Tape,
    z: Var,
    z_pos: Var,
    tau: Var,
    denom: SslDenominator,
) -> Result<Var> {
    check_same(tape, z, z_pos, "ssl")?;
    let b = tape.value(z).rows();
    if b == 0 {
        return Err(Error::TooFewRows {
            op: "ssl",
            need: 1,
            got: 0,
        });
    }
    let pos_sim = tape.cosine_similarity(z, z_pos)?;
    let pos_logits = tape.div_scalar(pos_sim, tau)?;
    let pos = tape.diag(pos_logits)?;
    let self_sim = tape.cosine_similarity(z, z)?;
    let self_logits = tape.div_scalar(self_sim, tau)?;
    let denom_logits = match denom {
        SslDenominator::Literal => self_logits,
        SslDenominator::SimClr => {
            // off-diagonal self similarities, positive on the diagonal
            let off_mask = tape.leaf(Matrix::from_fn(b, b, |i, j| if i == j { 0.0 } else { 1.0 }));
            let eye = tape.leaf(Matrix::identity(b));
            let ones_row = tape.leaf(Matrix::filled(1, b, 1.0));
            let off = tape.mul(self_logits, off_mask)?;
            let spread = tape.matmul(pos, ones_row)?;
            let on = tape.mul(spread, eye)?;
            tape.add(off, on)?
        }
    };
    let lse = tape.logsumexp_rows(denom_logits);
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean(diff))
}

fn with_tau<F>(tau: f64, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut tape = Tape::new();
    let t = tape.leaf(Matrix::scalar(tau));
    let l = f(&mut tape, t)?;
    Ok(tape.scalar(l))
}

pub fn clip_contrastive_loss(u: &Matrix, v: &Matrix, tau: f64) -> Result<f64> {
    with_tau(tau, |t, tau| {
        let (uu, vv) = (t.leaf(u.clone()), t.leaf(v.clone()));
        clip_contrastive_node(t, uu, vv, tau)
    })
}

pub fn ssl_loss(z: &Matrix, z_pos: &Matrix, tau: f64, denom: SslDenominator) -> Result<f64> {
    with_tau(tau, |t, tau| {
        let (a, b) = (t.leaf(z.clone()), t.leaf(z_pos.clone()));
        ssl_node(t, a, b, tau, denom)
    })
}

/// `L_CL + mu * L_SSL-U + mu * L_SSL-V`.
#[allow(clippy::too_many_arguments)]
pub fn gc_loss(
    paired_u: &Matrix,
    paired_v: &Matrix,
    ssl_u: (&Matrix, &Matrix),
    ssl_v: (&Matrix, &Matrix),
    tau: f64,
    mu: f64,
    denom: SslDenominator,
) -> Result<f64> {
    let cl = clip_contrastive_loss(paired_u, paired_v, tau)?;
    let su = ssl_loss(ssl_u.0, ssl_u.1, tau, denom)?;
    let sv = ssl_loss(ssl_v.0, ssl_v.1, tau, denom)?;
    Ok(cl + mu * su + mu * sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_similarity_matrix, Rng};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-2.0, 2.0))
    }

    #[test]
    fn single_pair_is_zero() {
        let u = Matrix::from_rows(&[[0.3, -1.0, 2.0]]);
        let v = Matrix::from_rows(&[[1.0, 0.5, 0.0]]);
        assert!(clip_contrastive_loss(&u, &v, 0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identity_pairs_value() {
        let i2 = Matrix::identity(2);
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let got = clip_contrastive_loss(&i2, &i2, 1.0).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn empty_pairs_contribute_zero() {
        let e = Matrix::zeros(0, 4);
        assert_eq!(clip_contrastive_loss(&e, &e, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn matched_beats_shuffled() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let u = random(8, 6, &mut rng);
            let noise = random(8, 6, &mut rng).scale(0.1);
            let v = u.add(&noise).unwrap();
            let shuffled = v.select_rows(&[3, 0, 6, 1, 7, 2, 5, 4]);
            let matched = clip_contrastive_loss(&u, &v, 0.1).unwrap();
            let mismatched = clip_contrastive_loss(&u, &shuffled, 0.1).unwrap();
            assert!(matched < mismatched, "seed {seed}");
        }
    }

    #[test]
    fn clip_matches_scalar_oracle() {
        let mut rng = Rng::new(7);
        let (u, v) = (random(5, 3, &mut rng), random(5, 3, &mut rng));
        let tau = 0.3;
        let s = cosine_similarity_matrix(&u, &v).unwrap();
        let mut acc = 0.0;
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| (s[(i, j)] / tau).exp()).sum();
            let col: f64 = (0..5).map(|j| (s[(j, i)] / tau).exp()).sum();
            acc += ((s[(i, i)] / tau).exp() / row).ln() + ((s[(i, i)] / tau).exp() / col).ln();
        }
        let want = -acc / 10.0;
        assert!((clip_contrastive_loss(&u, &v, tau).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn ssl_single_row_closed_form() {
        let z = Matrix::from_rows(&[[1.0, 2.0, -0.5]]);
        let zp = Matrix::from_rows(&[[0.8, 2.5, 0.1]]);
        let tau = 0.2;
        let s = cosine_similarity_matrix(&z, &zp).unwrap().item();
        let got = ssl_loss(&z, &zp, tau, SslDenominator::Literal).unwrap();
        assert!((got - (1.0 - s) / tau).abs() < 1e-12);
        assert!(
            ssl_loss(&z, &z, tau, SslDenominator::Literal)
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn ssl_matches_scalar_oracle() {
        let mut rng = Rng::new(8);
        let (z, zp) = (random(6, 4, &mut rng), random(6, 4, &mut rng));
        let tau = 0.5;
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut lit = 0.0;
        let mut simclr = 0.0;
        for i in 0..6 {
            let pos = (cos(z.row(i), zp.row(i)) / tau).exp();
            let all: f64 = (0..6).map(|j| (cos(z.row(i), z.row(j)) / tau).exp()).sum();
            let others: f64 = (0..6)
                .filter(|&j| j != i)
                .map(|j| (cos(z.row(i), z.row(j)) / tau).exp())
                .sum();
            lit += (pos / all).ln();
            simclr += (pos / (pos + others)).ln();
        }
        let got = ssl_loss(&z, &zp, tau, SslDenominator::Literal).unwrap();
        assert!((got + lit / 6.0).abs() < 1e-10);
        let got = ssl_loss(&z, &zp, tau, SslDenominator::SimClr).unwrap();
        assert!((got + simclr / 6.0).abs() < 1e-10);
    }

    #[test]
    fn gc_recomposes() {
        let mut rng = Rng::new(9);
        let (u, v) = (random(4, 3, &mut rng), random(4, 3, &mut rng));
        let (zu, zup) = (random(6, 3, &mut rng), random(6, 3, &mut rng));
        let (zv, zvp) = (random(6, 3, &mut rng), random(6, 3, &mut rng));
        let d = SslDenominator::Literal;
        let cl = clip_contrastive_loss(&u, &v, 0.4).unwrap();
        let a = ssl_loss(&zu, &zup, 0.4, d).unwrap();
        let b = ssl_loss(&zv, &zvp, 0.4, d).unwrap();
        let gc0 = gc_loss(&u, &v, (&zu, &zup), (&zv, &zvp), 0.4, 0.0, d).unwrap();
        assert_eq!(gc0, cl);
        let gc = gc_loss(&u, &v, (&zu, &zup), (&zv, &zvp), 0.4, 0.3, d).unwrap();
        assert!((gc - (cl + 0.3 * a + 0.3 * b)).abs() < 1e-12);
        // single-row self views have zero SSL loss, leaving L_CL
        let (z1, w1) = (zu.slice_rows(0, 1), zv.slice_rows(0, 1));
        let gc1 = gc_loss(&u, &v, (&z1, &z1), (&w1, &w1), 0.4, 1.0, d).unwrap();
        assert!((gc1 - cl).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature() {
        let u = Matrix::identity(2);
        assert!(clip_contrastive_loss(&u, &u, 0.0).is_err());
        assert!(clip_contrastive_loss(&u, &Matrix::identity(3), 1.0).is_err());
    }
}
