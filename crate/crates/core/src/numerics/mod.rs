//! Dense matrix primitives, distances, reductions and the finite-difference checker.

mod finite_diff;
mod matrix;
mod ops;
mod rng;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use ops::{
    batch_variance, column_means, cosine_similarity_matrix, cosine_similarity_matrix_with,
    logsumexp_rows, pairwise_sq_dists, pairwise_sq_dists_with, row_norms, NORM_FLOOR,
};
pub(crate) use ops::{dot, logsumexp, sq_dist};
pub use rng::{mix_seed, Rng, RngState};
