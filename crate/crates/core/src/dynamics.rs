//! Discrete-time dynamics abstractions shared by the ground-truth systems,
//! the learned surrogates, and the controller.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A discrete-time map `x+ = f(x, u)`.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Dynamics with analytic first derivatives.
pub trait Differentiable: Dynamics {
    /// Returns `(f(x, u), J_x, J_u)`.
    fn step_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>;

    /// Linearization `(A, B)` at the origin.
    fn linearize_at_origin(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = DVector::zeros(self.state_dim());
        let u = DVector::zeros(self.input_dim());
        let (_, a, b) = self.step_with_jacobians(&x, &u)?;
        Ok((a, b))
    }
}

/// Linear time-invariant system `x+ = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(Error::Config(format!(
                "incompatible linear model shapes A {}x{}, B {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }
}

impl Differentiable for LinearModel {
    fn step_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.step(x, u)?, self.a.clone(), self.b.clone()))
    }
}

/// Spectral norm of a small dense matrix.
pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, s| acc.max(*s))
}
