//! Execution policy for the data-parallel inner loops.
//!
//! With the `parallel` feature (on by default) row fills and independent
//! trials are spread over the rayon pool. Without it, or with
//! [`Execution::Sequential`], the same closures run in order on the calling
//! thread. Every parallel path writes disjoint outputs and performs its
//! reductions sequentially afterwards, so results are bit-identical across
//! policies.

/// Below this many output scalars a row fill stays on the calling thread.
const PAR_MIN_ELEMS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// The policy used when callers do not pick one.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Fills a `rows x cols` row-major buffer, calling `fill(i, row_i)` per row.
pub fn fill_rows<F>(exec: Execution, rows: usize, cols: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && rows * cols >= PAR_MIN_ELEMS {
        use rayon::prelude::*;
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
        return out;
    }
    let _ = (exec, PAR_MIN_ELEMS);
    out.chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| fill(i, row));
    out
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_rows_policies_agree() {
        let f = |i: usize, row: &mut [f64]| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (i as f64).sin() * (j as f64 + 0.5).ln();
            }
        };
        let a = fill_rows(Execution::Sequential, 200, 50, f);
        let b = fill_rows(Execution::Parallel, 200, 50, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indices_keeps_order() {
        let v = map_indices(Execution::Parallel, 1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
