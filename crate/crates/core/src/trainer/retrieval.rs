use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix_with, Matrix};
use crate::par::{map_indices, Execution};

/// Recall@k in both directions for row-aligned query/candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Queries from modality A ranking candidates from B.
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl RetrievalReport {
    /// Recall at `k` for `(a_to_b, b_to_a)`, if `k` was evaluated.
    pub fn at(&self, k: usize) -> Option<(f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some((self.a_to_b[i], self.b_to_a[i]))
    }
}

/// 0-based rank of the true match in row `i` of `sim`, ties going to the
/// lower index.
fn true_rank(sim: &Matrix, i: usize) -> usize {
    let row = sim.row(i);
    let s = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < i))
        .count()
}

fn recalls(sim: &Matrix, ks: &[usize], exec: Execution) -> Vec<f64> {
    let q = sim.rows();
    let ranks = map_indices(exec, q, |i| true_rank(sim, i));
    ks.iter()
        .map(|&k| {
            let k = k.min(q);
            ranks.iter().filter(|&&r| r < k).count() as f64 / q as f64
        })
        .collect()
}

pub fn evaluate_retrieval(u: &Matrix, v: &Matrix, ks: &[usize]) -> Result<RetrievalReport> {
    evaluate_retrieval_with(Execution::auto(), u, v, ks)
}

/// Ranks every candidate by cosine similarity. `k` larger than the query
/// count is treated as the query count.
pub fn evaluate_retrieval_with(
    exec: Execution,
    u: &Matrix,
    v: &Matrix,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if u.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_retrieval",
            left: u.shape(),
            right: v.shape(),
        });
    }
    if u.rows() == 0 {
        return Err(Error::TooFewRows {
            op: "evaluate_retrieval",
            need: 1,
            got: 0,
        });
    }
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("recall@0 is undefined".into()));
    }
    let sim = cosine_similarity_matrix_with(exec, u, v)?;
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        a_to_b: recalls(&sim, ks, exec),
        b_to_a: recalls(&sim.transpose(), ks, exec),
    })
}
