//! Exact one-sided Wilcoxon signed-rank test for small paired samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest sample handled by exact enumeration of sign assignments.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences used.
    pub n: usize,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// `P(W+ >= observed)` under the symmetric null.
    pub p_value: f64,
}

/// Average ranks of `|d|`, ties sharing the mean of their positions.
fn abs_ranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Tests whether the differences `d` are shifted above zero.
///
/// Zero differences are dropped. The p-value enumerates all `2^n` sign
/// patterns over the observed (possibly tied) ranks.
pub fn wilcoxon_greater(d: &[f64]) -> Result<WilcoxonResult> {
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wilcoxon input"));
    }
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            p_value: 1.0,
        });
    }
    if n > EXACT_MAX_N {
        return Err(Error::InvalidConfig(format!(
            "exact Wilcoxon limited to {EXACT_MAX_N} differences, got {n}"
        )));
    }
    let ranks = abs_ranks(&nz);
    // `+ 0.0` turns the -0.0 of an empty float sum into 0.0
    let w_plus = nz
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum::<f64>()
        + 0.0;
    let tol = 1e-9;
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            w >= w_plus - tol
        })
        .count();
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value: hits as f64 / (1u64 << n) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Number of subsets of `{1..n}` with sum >= w, by dynamic programming.
    fn tail_count(n: usize, w: usize) -> u64 {
        let max = n * (n + 1) / 2;
        let mut ways = vec![0u64; max + 1];
        ways[0] = 1;
        for r in 1..=n {
            for s in (r..=max).rev() {
                ways[s] += ways[s - r];
            }
        }
        ways[w.min(max + 1)..].iter().sum()
    }

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_greater(&[0.1, 0.3, 0.2, 0.5, 0.4]).unwrap();
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.p_value, 1.0 / 32.0);
    }

    #[test]
    fn matches_subset_sum_oracle_without_ties() {
        let d = [0.7, -0.2, 1.5, 0.9, -1.1, 2.0, 0.05, 1.3];
        let r = wilcoxon_greater(&d).unwrap();
        // ranks by |d|: 0.05:1 -0.2:2 0.7:3 0.9:4 -1.1:5 1.3:6 1.5:7 2.0:8
        assert_eq!(r.w_plus, 1.0 + 3.0 + 4.0 + 6.0 + 7.0 + 8.0);
        let want = tail_count(8, 29) as f64 / 256.0;
        assert!((r.p_value - want).abs() < 1e-15);
    }

    #[test]
    fn critical_value_n10() {
        // one-sided 5% critical value for n = 10 is W- <= 10
        let mk = |neg: &[usize]| -> Vec<f64> {
            (1..=10)
                .map(|r| {
                    if neg.contains(&r) {
                        -(r as f64)
                    } else {
                        r as f64
                    }
                })
                .collect()
        };
        let at10 = wilcoxon_greater(&mk(&[1, 2, 3, 4])).unwrap();
        assert!(
            at10.p_value <= 0.05 && at10.p_value > 0.04,
            "{}",
            at10.p_value
        );
        let at11 = wilcoxon_greater(&mk(&[5, 6])).unwrap();
        assert!(at11.p_value > 0.05, "{}", at11.p_value);
    }

    #[test]
    fn zeros_dropped_and_ties_averaged() {
        let r = wilcoxon_greater(&[0.0, 1.0, -1.0, 2.0]).unwrap();
        assert_eq!(r.n, 3);
        assert_eq!(r.w_plus, 1.5 + 3.0);
        // sign patterns over ranks {1.5, 1.5, 3}: sums >= 4.5 are {1.5,3} twice and all three
        assert_eq!(r.p_value, 3.0 / 8.0);
        assert_eq!(wilcoxon_greater(&[0.0, 0.0]).unwrap().p_value, 1.0);
    }

    #[test]
    fn opposite_shift_is_not_significant() {
        let r = wilcoxon_greater(&[-0.1, -0.3, -0.2, -0.5, -0.4]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.w_plus == 0.0 && r.w_plus.is_sign_positive());
    }
}
