use crate::numerics::Matrix;

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    let mut x = at.clone();
    let mut g = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + h;
        let fp = f(&x);
        x.data_mut()[idx] = orig - h;
        let fm = f(&x);
        x.data_mut()[idx] = orig;
        g.data_mut()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest entrywise relative error `|a-b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps entries whose true value is ~0 from inflating the ratio.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_ones() {
        let at = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3);
        let g = finite_diff_grad(|m| m.sum(), &at, 1e-5);
        assert!(g.data().iter().all(|x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_square_norm_gives_identity_map() {
        let at = Matrix::from_fn(2, 3, |i, j| i as f64 - 0.7 * j as f64);
        let g = finite_diff_grad(
            |m| 0.5 * m.data().iter().map(|x| x * x).sum::<f64>(),
            &at,
            1e-5,
        );
        assert!(max_relative_error(&g, &at, 1e-8) < 1e-8);
    }
}
