//! Forward-mode automatic differentiation.
//!
//! Model functions are written once against the [`Scalar`] trait and can then
//! be evaluated with plain `f64`, with [`Dual`] (value plus a batch of tangent
//! directions) or with [`Dual2`] (value, gradient and Hessian with respect to
//! a batch of seeded inputs).
//!
//! Derivative vectors are allowed to be empty, which stands for an identically
//! zero derivative. Constants therefore never allocate.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

/// Real scalar algebra needed by model code.
pub trait Scalar:
    Clone
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(x: f64) -> Self;
    fn value(&self) -> f64;

    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powi(&self, n: i32) -> Self;

    fn recip(&self) -> Self {
        Self::constant(1.0) / self.clone()
    }

    fn square(&self) -> Self {
        self.clone() * self.clone()
    }

    fn cosh(&self) -> Self {
        (self.exp() + (-self.clone()).exp()) * 0.5
    }
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn recip(&self) -> Self {
        f64::recip(*self)
    }
    fn square(&self) -> Self {
        *self * *self
    }
    fn cosh(&self) -> Self {
        f64::cosh(*self)
    }
}

/// `a * x + b * y`, treating empty slices as zero vectors.
fn axpby(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    match (x.is_empty(), y.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => x.iter().map(|xi| a * xi).collect(),
        (true, false) => y.iter().map(|yi| b * yi).collect(),
        (false, false) => {
            debug_assert_eq!(x.len(), y.len(), "tangent batch sizes differ");
            x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
        }
    }
}

fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    if x.is_empty() || a == 0.0 {
        Vec::new()
    } else {
        x.iter().map(|xi| a * xi).collect()
    }
}

/// First-order dual number carrying a batch of directional derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: f64,
    /// Derivative along each seeded direction; empty means zero.
    pub tangents: Vec<f64>,
}

impl Dual {
    pub fn new(value: f64, tangents: Vec<f64>) -> Self {
        Self { value, tangents }
    }

    /// Input `i` out of `n`, seeded with the unit direction `e_i`.
    pub fn variable(value: f64, i: usize, n: usize) -> Self {
        let mut tangents = vec![0.0; n];
        tangents[i] = 1.0;
        Self { value, tangents }
    }

    /// Derivative along direction `k` (zero for constants).
    pub fn tangent(&self, k: usize) -> f64 {
        self.tangents.get(k).copied().unwrap_or(0.0)
    }

    fn chain(&self, f0: f64, f1: f64) -> Self {
        Self { value: f0, tangents: scale(f1, &self.tangents) }
    }
}

/// Seeds `values` as the inputs of a first-order pass with `values.len()` directions.
pub fn seed_dual(values: &[f64]) -> Vec<Dual> {
    let n = values.len();
    values.iter().enumerate().map(|(i, &v)| Dual::variable(v, i, n)).collect()
}

/// Seeds `values` with the columns of `directions` (`n × k`) as tangents.
pub fn seed_dual_directions(values: &[f64], directions: &DMatrix<f64>) -> Vec<Dual> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| Dual::new(v, directions.row(i).iter().copied().collect()))
        .collect()
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual { value: self.value + rhs.value, tangents: axpby(1.0, &self.tangents, 1.0, &rhs.tangents) }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual { value: self.value - rhs.value, tangents: axpby(1.0, &self.tangents, -1.0, &rhs.tangents) }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value * rhs.value,
            tangents: axpby(rhs.value, &self.tangents, self.value, &rhs.tangents),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.value;
        let value = self.value * inv;
        Dual { value, tangents: axpby(inv, &self.tangents, -value * inv, &rhs.tangents) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { value: -self.value, tangents: scale(-1.0, &self.tangents) }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(mut self, rhs: f64) -> Dual {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(mut self, rhs: f64) -> Dual {
        self.value -= rhs;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, rhs: f64) -> Dual {
        Dual { value: self.value * rhs, tangents: scale(rhs, &self.tangents) }
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, rhs: f64) -> Dual {
        self * (1.0 / rhs)
    }
}

impl Scalar for Dual {
    fn constant(x: f64) -> Self {
        Dual { value: x, tangents: Vec::new() }
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(&self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }
    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn powi(&self, n: i32) -> Self {
        match n {
            0 => Self::constant(1.0),
            1 => self.clone(),
            _ => self.chain(self.value.powi(n), n as f64 * self.value.powi(n - 1)),
        }
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.value;
        self.chain(r, -r * r)
    }
    fn square(&self) -> Self {
        self.chain(self.value * self.value, 2.0 * self.value)
    }
    fn cosh(&self) -> Self {
        self.chain(self.value.cosh(), self.value.sinh())
    }
}

/// Number of entries of a packed lower-triangular `n × n` matrix.
const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Second-order dual number: value, gradient and Hessian with respect to
/// `n` seeded inputs. The Hessian is stored packed (lower triangle, row major).
#[derive(Clone, Debug, PartialEq)]
pub struct Dual2 {
    pub value: f64,
    /// Gradient; empty means zero.
    pub grad: Vec<f64>,
    /// Packed Hessian; empty means zero.
    pub hess: Vec<f64>,
}

impl Dual2 {
    pub fn variable(value: f64, i: usize, n: usize) -> Self {
        let mut grad = vec![0.0; n];
        grad[i] = 1.0;
        Self { value, grad, hess: Vec::new() }
    }

    pub fn gradient(&self, n: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; n]
        } else {
            self.grad.clone()
        }
    }

    /// Hessian entry `(i, j)`.
    pub fn hess_entry(&self, i: usize, j: usize) -> f64 {
        if self.hess.is_empty() {
            return 0.0;
        }
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.hess[r * (r + 1) / 2 + c]
    }

    /// Dense symmetric Hessian of size `n × n`.
    pub fn hessian(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| self.hess_entry(i, j))
    }

    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let grad = scale(f1, &self.grad);
        let mut hess = scale(f1, &self.hess);
        if f2 != 0.0 && !self.grad.is_empty() {
            let n = self.grad.len();
            if hess.is_empty() {
                hess = vec![0.0; packed_len(n)];
            }
            let g = &self.grad;
            let mut k = 0;
            for i in 0..n {
                let gi = f2 * g[i];
                for gj in &g[..=i] {
                    hess[k] += gi * gj;
                    k += 1;
                }
            }
        }
        Self { value: f0, grad, hess }
    }
}

/// Seeds `values` as the inputs of a second-order pass.
pub fn seed_dual2(values: &[f64]) -> Vec<Dual2> {
    let n = values.len();
    values.iter().enumerate().map(|(i, &v)| Dual2::variable(v, i, n)).collect()
}

impl Add for Dual2 {
    type Output = Dual2;
    fn add(self, rhs: Dual2) -> Dual2 {
        Dual2 {
            value: self.value + rhs.value,
            grad: axpby(1.0, &self.grad, 1.0, &rhs.grad),
            hess: axpby(1.0, &self.hess, 1.0, &rhs.hess),
        }
    }
}

impl Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, rhs: Dual2) -> Dual2 {
        Dual2 {
            value: self.value - rhs.value,
            grad: axpby(1.0, &self.grad, -1.0, &rhs.grad),
            hess: axpby(1.0, &self.hess, -1.0, &rhs.hess),
        }
    }
}

impl Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, rhs: Dual2) -> Dual2 {
        let grad = axpby(rhs.value, &self.grad, self.value, &rhs.grad);
        let mut hess = axpby(rhs.value, &self.hess, self.value, &rhs.hess);
        if !self.grad.is_empty() && !rhs.grad.is_empty() {
            let n = self.grad.len();
            if hess.is_empty() {
                hess = vec![0.0; packed_len(n)];
            }
            let (a, b) = (&self.grad, &rhs.grad);
            let mut k = 0;
            for i in 0..n {
                for j in 0..=i {
                    hess[k] += a[i] * b[j] + b[i] * a[j];
                    k += 1;
                }
            }
        }
        Dual2 { value: self.value * rhs.value, grad, hess }
    }
}

impl Div for Dual2 {
    type Output = Dual2;
    fn div(self, rhs: Dual2) -> Dual2 {
        if rhs.grad.is_empty() && rhs.hess.is_empty() {
            return self * (1.0 / rhs.value);
        }
        self * Scalar::recip(&rhs)
    }
}

impl Neg for Dual2 {
    type Output = Dual2;
    fn neg(self) -> Dual2 {
        self * -1.0
    }
}

impl Add<f64> for Dual2 {
    type Output = Dual2;
    fn add(mut self, rhs: f64) -> Dual2 {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for Dual2 {
    type Output = Dual2;
    fn sub(mut self, rhs: f64) -> Dual2 {
        self.value -= rhs;
        self
    }
}

impl Mul<f64> for Dual2 {
    type Output = Dual2;
    fn mul(self, rhs: f64) -> Dual2 {
        Dual2 { value: self.value * rhs, grad: scale(rhs, &self.grad), hess: scale(rhs, &self.hess) }
    }
}

impl Div<f64> for Dual2 {
    type Output = Dual2;
    fn div(self, rhs: f64) -> Dual2 {
        self * (1.0 / rhs)
    }
}

impl Scalar for Dual2 {
    fn constant(x: f64) -> Self {
        Dual2 { value: x, grad: Vec::new(), hess: Vec::new() }
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let r = 1.0 / self.value;
        self.chain(self.value.ln(), r, -r * r)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }
    fn sin(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        let d = 1.0 - t * t;
        self.chain(t, d, -2.0 * t * d)
    }
    fn powi(&self, n: i32) -> Self {
        match n {
            0 => Self::constant(1.0),
            1 => self.clone(),
            _ => {
                let x = self.value;
                let nf = n as f64;
                self.chain(x.powi(n), nf * x.powi(n - 1), nf * (nf - 1.0) * x.powi(n - 2))
            }
        }
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.value;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
    fn square(&self) -> Self {
        self.chain(self.value * self.value, 2.0 * self.value, 2.0)
    }
    fn cosh(&self) -> Self {
        let c = self.value.cosh();
        self.chain(c, self.value.sinh(), c)
    }
}
