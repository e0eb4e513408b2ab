use std::cell::OnceCell;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{spd_log_det, ConstraintJacobian, ConstraintSystem};
use crate::error::{Error, Result};

/// An explicitly stored constraint Jacobian with a lazily factorized Gram matrix.
#[derive(Clone, Debug)]
pub struct DenseJacobian {
    pub dc: DMatrix<f64>,
    gram: OnceCell<Option<Cholesky<f64, Dyn>>>,
}

impl DenseJacobian {
    pub fn new(dc: DMatrix<f64>) -> Self {
        Self { dc, gram: OnceCell::new() }
    }

    /// The dense Gram matrix `DC DCᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.dc * self.dc.transpose()
    }

    fn factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        self.gram
            .get_or_init(|| self.gram().cholesky())
            .as_ref()
            .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))
    }
}

impl ConstraintJacobian for DenseJacobian {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.dc * v
    }

    fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.dc.tr_mul(lambda)
    }

    fn gram_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor()?.solve(b))
    }

    fn log_det_gram(&self) -> Result<f64> {
        Ok(spd_log_det(self.factor()?))
    }

    fn cross_solve(&self, origin: &Self, b: &DVector<f64>) -> Result<DVector<f64>> {
        (&self.dc * origin.dc.transpose())
            .lu()
            .solve(b)
            .ok_or_else(|| Error::Numerical("singular cross Gram matrix".into()))
    }
}

/// `C(q) = A q − b` with potential `½‖q‖²`.
#[derive(Clone, Debug)]
pub struct AffineSystem {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl AffineSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len());
        Self { a, b }
    }

    /// Minimum-norm point of the affine subspace.
    pub fn particular_solution(&self) -> DVector<f64> {
        let g = &self.a * self.a.transpose();
        let lambda = g.cholesky().expect("A has full row rank").solve(&self.b);
        self.a.tr_mul(&lambda)
    }
}

impl ConstraintSystem for AffineSystem {
    type Jacobian = DenseJacobian;

    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    fn residual(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * q - &self.b)
    }

    fn jacobian(&self, _q: &DVector<f64>) -> Result<DenseJacobian> {
        Ok(DenseJacobian::new(self.a.clone()))
    }

    fn potential(&self, q: &DVector<f64>, _jac: &DenseJacobian) -> Result<f64> {
        Ok(0.5 * q.norm_squared())
    }

    fn grad_potential(&self, q: &DVector<f64>, _jac: &DenseJacobian) -> Result<DVector<f64>> {
        Ok(q.clone())
    }
}
