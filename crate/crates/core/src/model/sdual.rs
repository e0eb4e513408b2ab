//! Fixed-size dual numbers for models whose dimension is known at compile
//! time. They behave like [`super::Dual`] and [`super::Dual2`] seeded with
//! all `N` inputs, but live on the stack.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};

use super::ad::Scalar;
use super::{Model, SecondOrder};
use crate::error::{check_finite, Error, Result};

/// Value and gradient with respect to `N` inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SDual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> SDual<N> {
    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    #[inline]
    fn chain(&self, f0: f64, f1: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= f1);
        Self { v: f0, d }
    }
}

impl<const N: usize> Add for SDual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..N {
            self.d[k] += o.d[k];
        }
        self
    }
}

impl<const N: usize> Sub for SDual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..N {
            self.d[k] -= o.d[k];
        }
        self
    }
}

impl<const N: usize> Mul for SDual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = self.d[k] * o.v + o.d[k] * self.v;
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for SDual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Neg for SDual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for SDual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl<const N: usize> Sub<f64> for SDual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, c: f64) -> Self {
        self.v -= c;
        self
    }
}

impl<const N: usize> Mul<f64> for SDual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.chain(self.v * c, c)
    }
}

impl<const N: usize> Div<f64> for SDual<N> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<const N: usize> Scalar for SDual<N> {
    fn constant(x: f64) -> Self {
        Self { v: x, d: [0.0; N] }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s)
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn powi(&self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        self.chain(self.v.powi(n), n as f64 * self.v.powi(n - 1))
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }
    fn square(&self) -> Self {
        self.chain(self.v * self.v, 2.0 * self.v)
    }
    fn cosh(&self) -> Self {
        self.chain(self.v.cosh(), self.v.sinh())
    }
}

/// Value, gradient and (full, symmetric) Hessian with respect to `N` inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SDual2<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> SDual2<N> {
    pub fn variable(v: f64, i: usize) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        Self { v, g, h: [[0.0; N]; N] }
    }

    /// `f(self)` from `f`, `f′` and `f″` at the value.
    #[inline]
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self { v: f0, g: [0.0; N], h: [[0.0; N]; N] };
        for i in 0..N {
            out.g[i] = f1 * self.g[i];
            let gi = f2 * self.g[i];
            for j in 0..=i {
                let x = f1 * self.h[i][j] + gi * self.g[j];
                out.h[i][j] = x;
                out.h[j][i] = x;
            }
        }
        out
    }

    pub fn gradient(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.g)
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(N, N, |i, j| self.h[i][j])
    }
}

impl<const N: usize> Add for SDual2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.g[i] += o.g[i];
            for j in 0..N {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for SDual2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for i in 0..N {
            self.g[i] -= o.g[i];
            for j in 0..N {
                self.h[i][j] -= o.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Mul for SDual2<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut out = Self { v: self.v * o.v, g: [0.0; N], h: [[0.0; N]; N] };
        for i in 0..N {
            out.g[i] = self.g[i] * o.v + o.g[i] * self.v;
            for j in 0..=i {
                let x = self.h[i][j] * o.v + o.h[i][j] * self.v + self.g[i] * o.g[j] + o.g[i] * self.g[j];
                out.h[i][j] = x;
                out.h[j][i] = x;
            }
        }
        out
    }
}

impl<const N: usize> Div for SDual2<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Neg for SDual2<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Add<f64> for SDual2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl<const N: usize> Sub<f64> for SDual2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, c: f64) -> Self {
        self.v -= c;
        self
    }
}

impl<const N: usize> Mul<f64> for SDual2<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, c: f64) -> Self {
        self.v *= c;
        for i in 0..N {
            self.g[i] *= c;
            for j in 0..N {
                self.h[i][j] *= c;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for SDual2<N> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<const N: usize> Scalar for SDual2<N> {
    fn constant(x: f64) -> Self {
        Self { v: x, g: [0.0; N], h: [[0.0; N]; N] }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let d = 1.0 - t * t;
        self.chain(t, d, -2.0 * t * d)
    }
    fn powi(&self, n: i32) -> Self {
        match n {
            0 => Self::constant(1.0),
            1 => *self,
            _ => {
                let (x, nf) = (self.v, n as f64);
                self.chain(x.powi(n), nf * x.powi(n - 1), nf * (nf - 1.0) * x.powi(n - 2))
            }
        }
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
    fn square(&self) -> Self {
        self.chain(self.v * self.v, 2.0 * self.v, 2.0)
    }
    fn cosh(&self) -> Self {
        let c = self.v.cosh();
        self.chain(c, self.v.sinh(), c)
    }
}

fn check_dim<M: Model, const N: usize>(model: &M, theta: &[f64]) -> Result<()> {
    if theta.len() != N || model.dim_theta() != N {
        return Err(Error::Invalid(format!("static dual of size {N} used with dimension {}", theta.len())));
    }
    Ok(())
}

/// `DF(θ)` with stack-allocated duals; `N` must equal the model dimension.
pub fn static_jacobian<M: Model, const N: usize>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_dim::<M, N>(model, theta)?;
    let seeded: Vec<SDual<N>> = theta.iter().enumerate().map(|(i, &t)| SDual::variable(t, i)).collect();
    let out = model.forward(&seeded);
    let jac = DMatrix::from_fn(out.len(), N, |i, j| out[i].d[j]);
    check_finite("jacobian", jac.as_slice())?;
    Ok(jac)
}

/// Gradient of `f` with stack-allocated duals.
pub fn static_gradient<const N: usize>(theta: &[f64], f: impl Fn(&[SDual<N>]) -> SDual<N>) -> (f64, DVector<f64>) {
    let seeded: Vec<SDual<N>> = theta.iter().enumerate().map(|(i, &t)| SDual::variable(t, i)).collect();
    let out = f(&seeded);
    (out.v, DVector::from_column_slice(&out.d))
}

/// [`super::second_order`] with stack-allocated duals.
pub fn static_second_order<M: Model, const N: usize>(model: &M, theta: &[f64]) -> Result<SecondOrder> {
    check_dim::<M, N>(model, theta)?;
    let seeded: Vec<SDual2<N>> = theta.iter().enumerate().map(|(i, &t)| SDual2::variable(t, i)).collect();
    let out = model.forward(&seeded);
    let forward = DVector::from_iterator(out.len(), out.iter().map(|d| d.v));
    check_finite("forward", forward.as_slice())?;
    let jacobian = DMatrix::from_fn(out.len(), N, |i, j| out[i].g[j]);
    let hessians: Vec<DMatrix<f64>> = out.iter().map(SDual2::hessian).collect();
    for h in &hessians {
        check_finite("forward hessian", h.as_slice())?;
    }
    let s = model.noise_scale(&seeded);
    if !(s.v.is_finite() && s.v > 0.0) {
        return Err(Error::Domain { what: "noise scale", index: 0 });
    }
    Ok(SecondOrder { forward, jacobian, hessians, sigma: s.v, sigma_gradient: s.gradient(), sigma_hessian: s.hessian() })
}
