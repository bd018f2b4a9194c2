use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par::{fill_rows, Execution};

/// Floor applied to row norms before dividing in cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

fn check_cols(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `D[i][j] = ||a_i - b_j||^2`.
pub fn pairwise_sq_dists(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    pairwise_sq_dists_with(Execution::auto(), a, b)
}

pub fn pairwise_sq_dists_with(exec: Execution, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(a, b, "pairwise_sq_dists")?;
    let data = fill_rows(exec, a.rows(), b.rows(), |i, out| {
        let ai = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = sq_dist(ai, b.row(j));
        }
    });
    Ok(Matrix::from_parts(a.rows(), b.rows(), data))
}

/// Row norms floored at [`NORM_FLOOR`].
pub fn row_norms(a: &Matrix) -> Vec<f64> {
    a.row_iter()
        .map(|r| dot(r, r).sqrt().max(NORM_FLOOR))
        .collect()
}

/// `S[i][j] = <a_i, b_j> / (|a_i| |b_j|)` with norms floored at [`NORM_FLOOR`].
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    cosine_similarity_matrix_with(Execution::auto(), a, b)
}

pub fn cosine_similarity_matrix_with(exec: Execution, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(a, b, "cosine_similarity_matrix")?;
    let na = row_norms(a);
    let nb = row_norms(b);
    let data = fill_rows(exec, a.rows(), b.rows(), |i, out| {
        let ai = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(ai, b.row(j)) / (na[i] * nb[j]);
        }
    });
    Ok(Matrix::from_parts(a.rows(), b.rows(), data))
}

/// Column means of a batch.
pub fn column_means(t: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; t.cols()];
    for r in t.row_iter() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    let n = t.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Bessel-corrected batch spread: `1/(B-1) * sum_i ||t_i - mean||^2`.
pub fn batch_variance(t: &Matrix) -> Result<f64> {
    if t.rows() < 2 {
        return Err(Error::TooFewRows {
            op: "batch_variance",
            need: 2,
            got: t.rows(),
        });
    }
    let mean = column_means(t);
    let ss: f64 = t.row_iter().map(|r| sq_dist(r, &mean)).sum();
    Ok(ss / (t.rows() - 1) as f64)
}

/// Per-row `log sum_j exp(m[i][j])`, shifted by the row max.
pub fn logsumexp_rows(m: &Matrix) -> Result<Vec<f64>> {
    if !m.all_finite() {
        return Err(Error::NonFinite("logsumexp_rows input"));
    }
    Ok(m.row_iter().map(logsumexp).collect())
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
