use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// A named learnable matrix with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    #[serde(skip, default)]
    grad: Option<Matrix>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Accumulated gradient, zeros if nothing has been accumulated.
    pub fn grad(&self) -> Matrix {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn accumulate_grad(&mut self, g: &Matrix) {
        assert_eq!(
            g.shape(),
            self.value.shape(),
            "gradient shape for {}",
            self.name
        );
        match &mut self.grad {
            Some(acc) => acc.axpy(1.0, g).expect("shape checked"),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
