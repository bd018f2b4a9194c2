//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built once per forward pass: leaves hold parameter or
//! constant values, every other node records its operation and cached
//! output. [`value_and_grad`] runs the backward sweep and hands back the
//! loss value together with one gradient per requested leaf.

mod param;
mod tape;

pub use param::Param;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix};

/// Loss value and the gradient for each of `wrt`, in order.
pub fn value_and_grad(tape: &Tape, loss: Var, wrt: &[Var]) -> Result<(f64, Vec<Matrix>)> {
    let grads = tape.backward(loss)?;
    Ok((
        tape.scalar(loss),
        wrt.iter().map(|&v| grads.wrt(v)).collect(),
    ))
}

/// Outcome of comparing reverse-mode and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Checks the gradient of `build` (a scalar graph over one input) at `at`
/// against central finite differences with step `h`.
pub fn check_gradient<F>(build: F, at: &Matrix, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let loss = build(&mut tape, x)?;
    let (_, g) = value_and_grad(&tape, loss, &[x])?;
    let numeric = finite_diff_grad(
        |m| {
            let mut t = Tape::new();
            let x = t.leaf(m.clone());
            build(&mut t, x).map(|l| t.scalar(l)).unwrap_or(f64::NAN)
        },
        at,
        h,
    );
    let max_abs_error = g[0]
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error: max_relative_error(&g[0], &numeric, REL_ERROR_FLOOR),
        max_abs_error,
    })
}
