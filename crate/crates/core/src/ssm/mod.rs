//! Structured constraints for Markovian state-space models.
//!
//! For a model `x_t = G_t(φ, ν_t, x_{t−1})`, `y_t = H_t(x_t) + σ η_t` with
//! invertible `H_t`, lifting in the naive way gives a constraint whose
//! Jacobian is dense in the innovations. Inverting the observation map
//! instead,
//!
//! ```text
//! x̄_t = H_t⁻¹(y_t − σ η_t),   C̄_t = G_t(φ, ν_t, x̄_{t−1}) − x̄_t,
//! ```
//!
//! defines the same manifold, but each `C̄_t` touches only `φ, ν_t, η_{t−1},
//! η_t`. Its Gram matrix is block tridiagonal plus a rank-`d_φ` term, so
//! solves and log-determinants cost `O(T)`.
//!
//! On the manifold `DC = diag(DH_t) L⁻¹ DC̄` with `L` unit lower block
//! bidiagonal, so both have the same row space (tangent projections agree)
//! and `½ log det G = ½ log det Ḡ + Σ_t log|det DH_t(x̄_t)|`.

mod btd;

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};

pub use btd::{
    btd_logdet, btd_solve, BlockCholesky, BlockLu, BlockTridiagonal, BlockTridiagonalGeneral, BlockTridiagonalGram,
    GramFactorization,
};

use crate::error::{check_finite, Error, Result};
use crate::geometry::{ConstraintJacobian, ConstraintSystem};
use crate::model::ad::{seed_dual, Dual, Dual2};
use crate::model::Scalar;
use crate::zoo::{ssm_prior_potential, ssm_states, NonlinearSsmModel, SSM_PARAMS};

/// A Markovian state-space model with `d`-dimensional states and
/// observations and an invertible observation map.
///
/// Steps are indexed from zero; `x_prev` is `None` at `t = 0`. Noise is
/// `σ(φ) η_t` with `η_t ~ N(0, I)`.
pub trait MarkovSsm: Sync {
    fn n_steps(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn observation(&self, t: usize) -> &[f64];

    fn transition<S: Scalar>(&self, t: usize, phi: &[S], nu_t: &[S], x_prev: Option<&[S]>) -> Vec<S>;
    fn observe(&self, t: usize, phi: &[f64], x: &[f64]) -> Vec<f64>;
    fn observe_inverse<S: Scalar>(&self, t: usize, phi: &[S], z: &[S]) -> Vec<S>;
    /// `log |det DH_t(x)|`.
    fn log_abs_det_observe_jacobian<S: Scalar>(&self, t: usize, phi: &[S], x: &[S]) -> S;
    fn noise_scale<S: Scalar>(&self, phi: &[S]) -> S;
    /// Negative log prior of `(φ, ν)`.
    fn prior_potential<S: Scalar>(&self, phi: &[S], nu: &[S]) -> S;
}

impl<M: MarkovSsm> MarkovSsm for &M {
    fn n_steps(&self) -> usize {
        (**self).n_steps()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn observation(&self, t: usize) -> &[f64] {
        (**self).observation(t)
    }
    fn transition<S: Scalar>(&self, t: usize, phi: &[S], nu_t: &[S], x_prev: Option<&[S]>) -> Vec<S> {
        (**self).transition(t, phi, nu_t, x_prev)
    }
    fn observe(&self, t: usize, phi: &[f64], x: &[f64]) -> Vec<f64> {
        (**self).observe(t, phi, x)
    }
    fn observe_inverse<S: Scalar>(&self, t: usize, phi: &[S], z: &[S]) -> Vec<S> {
        (**self).observe_inverse(t, phi, z)
    }
    fn log_abs_det_observe_jacobian<S: Scalar>(&self, t: usize, phi: &[S], x: &[S]) -> S {
        (**self).log_abs_det_observe_jacobian(t, phi, x)
    }
    fn noise_scale<S: Scalar>(&self, phi: &[S]) -> S {
        (**self).noise_scale(phi)
    }
    fn prior_potential<S: Scalar>(&self, phi: &[S], nu: &[S]) -> S {
        (**self).prior_potential(phi, nu)
    }
}

impl MarkovSsm for NonlinearSsmModel {
    fn n_steps(&self) -> usize {
        self.len()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        SSM_PARAMS
    }
    fn observation(&self, t: usize) -> &[f64] {
        &crate::model::Model::observed(self)[t..t + 1]
    }

    fn transition<S: Scalar>(&self, _t: usize, phi: &[S], nu_t: &[S], x_prev: Option<&[S]>) -> Vec<S> {
        let (gamma, rho) = (phi[1].exp(), phi[2].tanh());
        match x_prev {
            None => ssm_states(&phi[0], &gamma, &rho, nu_t),
            Some(x) => vec![phi[0].clone() + rho * (x[0].clone() - phi[0].clone()) + gamma * nu_t[0].clone()],
        }
    }

    fn observe(&self, _t: usize, _phi: &[f64], x: &[f64]) -> Vec<f64> {
        vec![x[0].exp()]
    }

    fn observe_inverse<S: Scalar>(&self, _t: usize, _phi: &[S], z: &[S]) -> Vec<S> {
        vec![z[0].ln()]
    }

    fn log_abs_det_observe_jacobian<S: Scalar>(&self, _t: usize, _phi: &[S], x: &[S]) -> S {
        x[0].clone()
    }

    fn noise_scale<S: Scalar>(&self, phi: &[S]) -> S {
        phi[3].exp()
    }

    fn prior_potential<S: Scalar>(&self, phi: &[S], nu: &[S]) -> S {
        ssm_prior_potential(phi, nu)
    }
}

/// Local block `t`: `C̄_t` and `log|det DH_t(x̄_t)|` as functions of the
/// local variables `(φ, ν_t, η_{t−1}, η_t)`, laid out in that order.
fn local_block<M: MarkovSsm, S: Scalar>(m: &M, t: usize, local: &[S]) -> (Vec<S>, S) {
    let (p, d) = (m.n_params(), m.state_dim());
    let phi = &local[..p];
    let nu = &local[p..p + d];
    let eta_prev = &local[p + d..p + 2 * d];
    let eta = &local[p + 2 * d..p + 3 * d];
    let sigma = m.noise_scale(phi);
    let x_bar = |s: usize, e: &[S]| -> Vec<S> {
        let z: Vec<S> = m.observation(s).iter().zip(e).map(|(y, e)| -(sigma.clone() * e.clone()) + *y).collect();
        m.observe_inverse(s, phi, &z)
    };
    let xt = x_bar(t, eta);
    let prev = if t > 0 { Some(x_bar(t - 1, eta_prev)) } else { None };
    let g = m.transition(t, phi, nu, prev.as_deref());
    let c = g.into_iter().zip(&xt).map(|(g, x)| g - x.clone()).collect();
    let a = m.log_abs_det_observe_jacobian(t, phi, &xt);
    (c, a)
}

/// Splits `q = (φ, ν₁…ν_T, η₁…η_T)`.
fn split<'a, M: MarkovSsm>(m: &M, q: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
    let (p, n) = (m.n_params(), m.n_steps() * m.state_dim());
    (&q[..p], &q[p..p + n], &q[p + n..p + 2 * n])
}

fn local_values<M: MarkovSsm>(m: &M, t: usize, phi: &[f64], nu: &[f64], eta: &[f64]) -> Vec<f64> {
    let d = m.state_dim();
    let mut v = phi.to_vec();
    v.extend_from_slice(&nu[t * d..(t + 1) * d]);
    if t > 0 {
        v.extend_from_slice(&eta[(t - 1) * d..t * d]);
    } else {
        v.extend(std::iter::repeat(0.0).take(d));
    }
    v.extend_from_slice(&eta[t * d..(t + 1) * d]);
    v
}

/// Global index of local variable `k` of block `t`, or `None` for the
/// absent `η_{−1}`.
fn global_index<M: MarkovSsm>(m: &M, t: usize, k: usize) -> Option<usize> {
    let (p, d, n) = (m.n_params(), m.state_dim(), m.n_steps() * m.state_dim());
    if k < p {
        Some(k)
    } else if k < p + d {
        Some(p + t * d + (k - p))
    } else if k < p + 2 * d {
        (t > 0).then(|| p + n + (t - 1) * d + (k - p - d))
    } else {
        Some(p + n + t * d + (k - p - 2 * d))
    }
}

/// `C̄(φ, ν, η)` stacked over steps.
pub fn ssm_constraint<M: MarkovSsm>(m: &M, phi: &[f64], nu: &[f64], eta: &[f64]) -> Result<DVector<f64>> {
    let d = m.state_dim();
    let mut c = DVector::zeros(m.n_steps() * d);
    for t in 0..m.n_steps() {
        let (ct, _) = local_block(m, t, &local_values(m, t, phi, nu, eta));
        c.rows_mut(t * d, d).copy_from_slice(&ct);
    }
    check_finite("constraint", c.as_slice())?;
    Ok(c)
}

/// The structured Gram matrix `Ḡ = DC̄ DC̄ᵀ` at `(φ, ν, η)`.
pub fn build_structured_gram<M: MarkovSsm>(m: &M, phi: &[f64], nu: &[f64], eta: &[f64]) -> Result<BlockTridiagonalGram> {
    let mut q = phi.to_vec();
    q.extend_from_slice(nu);
    q.extend_from_slice(eta);
    let sys = StructuredSsm::new(m);
    Ok(sys.jacobian(&DVector::from_vec(q))?.gram())
}

/// Sparse Jacobian of the structured constraint.
#[derive(Clone, Debug)]
pub struct SsmJacobian {
    d: usize,
    /// `∂C̄/∂φ`, `T·d × d_φ`.
    pub u: DMatrix<f64>,
    /// `∂C̄_t/∂ν_t`.
    pub nu: Vec<DMatrix<f64>>,
    /// `∂C̄_t/∂η_t`.
    pub eta_diag: Vec<DMatrix<f64>>,
    /// `∂C̄_t/∂η_{t−1}` at index `t − 1`.
    pub eta_sub: Vec<DMatrix<f64>>,
    factor: OnceCell<GramFactorization>,
}

impl SsmJacobian {
    fn n_steps(&self) -> usize {
        self.nu.len()
    }

    fn p(&self) -> usize {
        self.u.ncols()
    }

    /// `Ḡ` in block form.
    pub fn gram(&self) -> BlockTridiagonalGram {
        let n = self.n_steps();
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        for t in 0..n {
            let mut dt = &self.nu[t] * self.nu[t].transpose() + &self.eta_diag[t] * self.eta_diag[t].transpose();
            if t > 0 {
                let e = &self.eta_sub[t - 1];
                dt += e * e.transpose();
                sub.push(e * self.eta_diag[t - 1].transpose());
            }
            diag.push(dt);
        }
        BlockTridiagonalGram::new(BlockTridiagonal::new(diag, sub), self.u.clone())
    }

    pub fn factor(&self) -> Result<&GramFactorization> {
        if self.factor.get().is_none() {
            let f = self.gram().factor()?;
            let _ = self.factor.set(f);
        }
        Ok(self.factor.get().expect("factor cached above"))
    }

    /// Dense `DC̄`, for testing.
    pub fn dense(&self) -> DMatrix<f64> {
        let (n, d, p) = (self.n_steps(), self.d, self.p());
        let mut m = DMatrix::zeros(n * d, p + 2 * n * d);
        m.view_mut((0, 0), (n * d, p)).copy_from(&self.u);
        for t in 0..n {
            m.view_mut((t * d, p + t * d), (d, d)).copy_from(&self.nu[t]);
            m.view_mut((t * d, p + n * d + t * d), (d, d)).copy_from(&self.eta_diag[t]);
            if t > 0 {
                m.view_mut((t * d, p + n * d + (t - 1) * d), (d, d)).copy_from(&self.eta_sub[t - 1]);
            }
        }
        m
    }
}

impl ConstraintJacobian for SsmJacobian {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let (n, d, p) = (self.n_steps(), self.d, self.p());
        let mut out = &self.u * v.rows(0, p);
        for t in 0..n {
            let mut r = &self.nu[t] * v.rows(p + t * d, d) + &self.eta_diag[t] * v.rows(p + n * d + t * d, d);
            if t > 0 {
                r += &self.eta_sub[t - 1] * v.rows(p + n * d + (t - 1) * d, d);
            }
            let mut o = out.rows_mut(t * d, d);
            o += r;
        }
        out
    }

    fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let (n, d, p) = (self.n_steps(), self.d, self.p());
        let mut out = DVector::zeros(p + 2 * n * d);
        out.rows_mut(0, p).copy_from(&self.u.tr_mul(lambda));
        for t in 0..n {
            let lt = lambda.rows(t * d, d);
            out.rows_mut(p + t * d, d).copy_from(&self.nu[t].tr_mul(&lt));
            let mut e = self.eta_diag[t].tr_mul(&lt);
            if t + 1 < n {
                e += self.eta_sub[t].tr_mul(&lambda.rows((t + 1) * d, d));
            }
            out.rows_mut(p + n * d + t * d, d).copy_from(&e);
        }
        out
    }

    fn gram_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor()?.solve(b))
    }

    fn log_det_gram(&self) -> Result<f64> {
        Ok(self.factor()?.log_det())
    }

    /// `DC̄(q_m) DC̄(q₀)ᵀ` is a nonsymmetric block tridiagonal matrix plus
    /// `U_m U₀ᵀ`; block LU plus Woodbury.
    fn cross_solve(&self, origin: &Self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_steps();
        let mut diag = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n.saturating_sub(1));
        let mut upper = Vec::with_capacity(n.saturating_sub(1));
        for t in 0..n {
            let mut dt = &self.nu[t] * origin.nu[t].transpose() + &self.eta_diag[t] * origin.eta_diag[t].transpose();
            if t > 0 {
                dt += &self.eta_sub[t - 1] * origin.eta_sub[t - 1].transpose();
                lower.push(&self.eta_sub[t - 1] * origin.eta_diag[t - 1].transpose());
                upper.push(&self.eta_diag[t - 1] * origin.eta_sub[t - 1].transpose());
            }
            diag.push(dt);
        }
        let lu = BlockTridiagonalGeneral { diag, lower, upper }.lu()?;
        let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = lu.solve_matrix(&rhs)?;
        let p = self.p();
        if p == 0 {
            return Ok(DVector::from_column_slice(x.as_slice()));
        }
        let z = lu.solve_matrix(&self.u)?;
        let cap = DMatrix::identity(p, p) + origin.u.tr_mul(&z);
        let w = cap
            .lu()
            .solve(&origin.u.tr_mul(&x))
            .ok_or_else(|| Error::Numerical("singular cross capacitance".into()))?;
        Ok(DVector::from_column_slice((x - z * w).as_slice()))
    }
}

/// The structured constraint system over `q = (φ, ν, η)`; chain states are
/// `(φ, ν)`, the same `θ` as the naive lifting of the model.
#[derive(Clone, Debug)]
pub struct StructuredSsm<M> {
    pub model: M,
}

impl<M: MarkovSsm> StructuredSsm<M> {
    pub fn new(model: M) -> Self {
        Self { model }
    }

    fn local_dim(&self) -> usize {
        self.model.n_params() + 3 * self.model.state_dim()
    }

    /// `η` from `(φ, ν)` by running the state recursion forward.
    pub fn lift(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let m = &self.model;
        let (p, d, n) = (m.n_params(), m.state_dim(), m.n_steps());
        if theta.len() != p + n * d {
            return Err(Error::Invalid(format!("state has length {}, expected {}", theta.len(), p + n * d)));
        }
        let (phi, nu) = theta.split_at(p);
        let sigma = m.noise_scale(phi);
        let mut q = theta.to_vec();
        let mut x: Option<Vec<f64>> = None;
        for t in 0..n {
            let xt = m.transition(t, phi, &nu[t * d..(t + 1) * d], x.as_deref());
            let h = m.observe(t, phi, &xt);
            q.extend(m.observation(t).iter().zip(&h).map(|(y, h)| (y - h) / sigma));
            x = Some(xt);
        }
        check_finite("lifted state", &q)?;
        Ok(DVector::from_vec(q))
    }
}

impl<M: MarkovSsm> ConstraintSystem for StructuredSsm<M> {
    type Jacobian = SsmJacobian;

    fn dim(&self) -> usize {
        self.model.n_params() + 2 * self.model.n_steps() * self.model.state_dim()
    }

    fn n_constraints(&self) -> usize {
        self.model.n_steps() * self.model.state_dim()
    }

    fn residual(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let (phi, nu, eta) = split(&self.model, q.as_slice());
        ssm_constraint(&self.model, phi, nu, eta)
    }

    fn jacobian(&self, q: &DVector<f64>) -> Result<SsmJacobian> {
        self.residual_and_jacobian(q).map(|(_, j)| j)
    }

    fn residual_and_jacobian(&self, q: &DVector<f64>) -> Result<(DVector<f64>, SsmJacobian)> {
        let m = &self.model;
        let (p, d, n) = (m.n_params(), m.state_dim(), m.n_steps());
        let (phi, nu, eta) = split(m, q.as_slice());
        let mut c = DVector::zeros(n * d);
        let mut u = DMatrix::zeros(n * d, p);
        let mut nus = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        for t in 0..n {
            let local = seed_dual(&local_values(m, t, phi, nu, eta));
            let (ct, _) = local_block::<M, Dual>(m, t, &local);
            let block = |off: usize| DMatrix::from_fn(d, d, |i, j| ct[i].tangent(off + j));
            for i in 0..d {
                c[t * d + i] = ct[i].value;
                for k in 0..p {
                    u[(t * d + i, k)] = ct[i].tangent(k);
                }
            }
            nus.push(block(p));
            if t > 0 {
                sub.push(block(p + d));
            }
            diag.push(block(p + 2 * d));
        }
        check_finite("constraint", c.as_slice())?;
        check_finite("constraint jacobian", u.as_slice())?;
        for b in nus.iter().chain(&diag).chain(&sub) {
            check_finite("constraint jacobian", b.as_slice())?;
        }
        Ok((c, SsmJacobian { d, u, nu: nus, eta_diag: diag, eta_sub: sub, factor: OnceCell::new() }))
    }

    fn potential(&self, q: &DVector<f64>, jac: &SsmJacobian) -> Result<f64> {
        let m = &self.model;
        let (phi, nu, eta) = split(m, q.as_slice());
        let mut u = m.prior_potential(phi, nu) + 0.5 * eta.iter().map(|e| e * e).sum::<f64>() + 0.5 * jac.log_det_gram()?;
        for t in 0..m.n_steps() {
            u += local_block(m, t, &local_values(m, t, phi, nu, eta)).1;
        }
        check_finite("potential", &[u])?;
        Ok(u)
    }

    fn grad_potential(&self, q: &DVector<f64>, jac: &SsmJacobian) -> Result<DVector<f64>> {
        let m = &self.model;
        let (p, d, n) = (m.n_params(), m.state_dim(), m.n_steps());
        let (phi, nu, eta) = split(m, q.as_slice());
        let mut g = DVector::zeros(self.dim());

        let theta: Vec<f64> = phi.iter().chain(nu).copied().collect();
        let seeded = seed_dual(&theta);
        let prior = m.prior_potential(&seeded[..p], &seeded[p..]);
        for k in 0..theta.len() {
            g[k] = prior.tangent(k);
        }
        for (k, e) in eta.iter().enumerate() {
            g[p + n * d + k] = *e;
        }

        // ∂ₖ ½ log det Ḡ = Σᵢⱼ Wᵢⱼ ∂ₖDC̄ᵢⱼ with W = Ḡ⁻¹ DC̄; row block t of
        // DC̄ depends on the local variables of block t only, so W is needed
        // on the same pattern, which takes Ḡ⁻¹U and the band of Ḡ⁻¹.
        let factor = jac.factor()?;
        let w_phi = factor.solve_matrix(&jac.u);
        let (inv_diag, inv_sub) = factor.inverse_band();
        let nl = self.local_dim();
        for t in 0..n {
            let mut w = DMatrix::zeros(d, nl);
            w.view_mut((0, 0), (d, p)).copy_from(&w_phi.rows(t * d, d));
            w.view_mut((0, p), (d, d)).copy_from(&(&inv_diag[t] * &jac.nu[t]));
            let mut we = &inv_diag[t] * &jac.eta_diag[t];
            if t + 1 < n {
                we += inv_sub[t].tr_mul(&jac.eta_sub[t]);
            }
            w.view_mut((0, p + 2 * d), (d, d)).copy_from(&we);
            if t > 0 {
                let wp = &inv_sub[t - 1] * &jac.eta_diag[t - 1] + &inv_diag[t] * &jac.eta_sub[t - 1];
                w.view_mut((0, p + d), (d, d)).copy_from(&wp);
            }

            let local = crate::model::ad::seed_dual2(&local_values(m, t, phi, nu, eta));
            let (ct, a) = local_block::<M, Dual2>(m, t, &local);
            for k in 0..nl {
                let Some(gk) = global_index(m, t, k) else { continue };
                let mut acc = a.gradient(nl)[k];
                for (i, ci) in ct.iter().enumerate() {
                    for j in 0..nl {
                        acc += w[(i, j)] * ci.hess_entry(j, k);
                    }
                }
                g[gk] += acc;
            }
        }
        check_finite("potential gradient", g.as_slice())?;
        Ok(g)
    }

    fn state<'a>(&self, q: &'a DVector<f64>) -> &'a [f64] {
        let n = self.model.n_params() + self.model.n_steps() * self.model.state_dim();
        &q.as_slice()[..n]
    }

    fn lift_state(&self, state: &[f64]) -> Result<DVector<f64>> {
        self.lift(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_momentum, project_position, LiftedModel, ManifoldPoint, ProjectionSolver};
    use crate::zoo::SsmParams;

    /// `x_t = A x_{t−1} + B ν_t`, `y_t = x_t + σ η_t`, no global parameters.
    struct LinearSsm {
        y: Vec<f64>,
    }

    impl MarkovSsm for LinearSsm {
        fn n_steps(&self) -> usize {
            self.y.len() / 2
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn n_params(&self) -> usize {
            0
        }
        fn observation(&self, t: usize) -> &[f64] {
            &self.y[2 * t..2 * t + 2]
        }
        fn transition<S: Scalar>(&self, _t: usize, _phi: &[S], nu: &[S], x: Option<&[S]>) -> Vec<S> {
            let mut out = vec![nu[0].clone() * 0.5, nu[1].clone() * 0.3 + nu[0].clone() * 0.1];
            if let Some(x) = x {
                out[0] = out[0].clone() + x[0].clone() * 0.9 - x[1].clone() * 0.2;
                out[1] = out[1].clone() + x[0].clone() * 0.1 + x[1].clone() * 0.8;
            }
            out
        }
        fn observe(&self, _t: usize, _phi: &[f64], x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
        fn observe_inverse<S: Scalar>(&self, _t: usize, _phi: &[S], z: &[S]) -> Vec<S> {
            z.to_vec()
        }
        fn log_abs_det_observe_jacobian<S: Scalar>(&self, _t: usize, _phi: &[S], _x: &[S]) -> S {
            S::constant(0.0)
        }
        fn noise_scale<S: Scalar>(&self, _phi: &[S]) -> S {
            S::constant(0.2)
        }
        fn prior_potential<S: Scalar>(&self, _phi: &[S], nu: &[S]) -> S {
            nu.iter().fold(S::constant(0.0), |a, n| a + n.square() * 0.5)
        }
    }

    fn ssm(t_len: usize, sigma: f64, seed: u64) -> (NonlinearSsmModel, Vec<f64>) {
        let (m, sim, _) = NonlinearSsmModel::simulate(&SsmParams::truth(sigma), t_len, seed);
        let th = NonlinearSsmModel::theta_of(&sim);
        (m, th)
    }

    #[test]
    fn structured_gram_matches_dense_product() {
        for t_len in [1, 2, 5, 8] {
            let (m, th) = ssm(t_len, 0.3, t_len as u64);
            let sys = StructuredSsm::new(m);
            let q = sys.lift(&th).unwrap() + DVector::from_fn(4 + 2 * t_len, |i, _| 0.01 * (i as f64).sin());
            let jac = sys.jacobian(&q).unwrap();
            let dense = jac.dense();
            let g = &dense * dense.transpose();
            let b = DVector::from_fn(t_len, |i, _| 1.0 + i as f64);
            let x = jac.gram_solve(&b).unwrap();
            assert!((&g * &x - &b).amax() < 1e-8);
            let ld: f64 = g.symmetric_eigenvalues().iter().map(|v| v.ln()).sum();
            assert!((jac.log_det_gram().unwrap() - ld).abs() < 1e-8);
            assert!((jac.gram().dense() - &g).amax() < 1e-12);
            let v = DVector::from_fn(sys.dim(), |i, _| (i as f64 * 0.7).cos());
            assert!((jac.apply(&v) - &dense * &v).amax() < 1e-12);
            assert!((jac.apply_transpose(&b) - dense.tr_mul(&b)).amax() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (m, th) = ssm(6, 0.2, 4);
        let sys = StructuredSsm::new(m);
        let q = sys.lift(&th).unwrap();
        let jac = sys.jacobian(&q).unwrap().dense();
        let fd = crate::model::finite_difference_jacobian(
            |x| sys.residual(&DVector::from_column_slice(x)).unwrap().as_slice().to_vec(),
            q.as_slice(),
        );
        assert!(crate::model::relative_discrepancy(&jac, &fd) < 1e-6);
    }

    #[test]
    fn markov_locality_of_the_jacobian() {
        let (m, th) = ssm(7, 0.5, 3);
        let sys = StructuredSsm::new(m);
        let jac = sys.jacobian(&sys.lift(&th).unwrap()).unwrap().dense();
        for t in 0..7 {
            for s in 0..7 {
                if s != t {
                    assert_eq!(jac[(t, 4 + s)], 0.0);
                }
                if s != t && s + 1 != t {
                    assert_eq!(jac[(t, 4 + 7 + s)], 0.0);
                }
            }
        }
    }

    #[test]
    fn level_sets_agree_with_the_naive_lifting() {
        let (m, th) = ssm(6, 0.1, 9);
        let dense = LiftedModel::new(m.clone());
        let sys = StructuredSsm::new(m);
        let q = sys.lift(&th).unwrap();
        assert!((&q - dense.lift(&th).unwrap()).amax() < 1e-12);
        assert!(sys.residual(&q).unwrap().amax() < 1e-12);
        assert!(dense.residual(&q).unwrap().amax() < 1e-12);
        let off = &q + DVector::from_fn(q.len(), |i, _| 1e-3 * ((i * 7) as f64).cos());
        assert!(sys.residual(&off).unwrap().amax() > 1e-6);
        assert!(dense.residual(&off).unwrap().amax() > 1e-6);
    }

    #[test]
    fn potential_and_projected_gradient_match_the_naive_lifting() {
        let (m, th) = ssm(6, 0.3, 11);
        let dense = LiftedModel::new(m.clone());
        let sys = StructuredSsm::new(m);
        let q = sys.lift(&th).unwrap();
        let ps = ManifoldPoint::new(&sys, q.clone()).unwrap();
        let pd = ManifoldPoint::new(&dense, q).unwrap();
        assert!((ps.potential(&sys).unwrap() - pd.potential(&dense).unwrap()).abs() < 1e-8);
        let gs = project_momentum(ps.grad_potential(&sys).unwrap(), &ps.jacobian).unwrap();
        let gd = project_momentum(pd.grad_potential(&dense).unwrap(), &pd.jacobian).unwrap();
        assert!((&gs - &gd).amax() < 1e-8, "{}", (&gs - &gd).amax());
    }

    #[test]
    fn gradient_matches_finite_differences_of_the_potential() {
        let (m, th) = ssm(5, 0.4, 2);
        let sys = StructuredSsm::new(m);
        let q = sys.lift(&th).unwrap() + DVector::from_fn(14, |i, _| 0.02 * (i as f64).sin());
        let u = |x: &[f64]| {
            let q = DVector::from_column_slice(x);
            sys.potential(&q, &sys.jacobian(&q).unwrap()).unwrap()
        };
        let g = sys.grad_potential(&q, &sys.jacobian(&q).unwrap()).unwrap();
        for k in 0..q.len() {
            let h = 1e-6;
            let mut a = q.as_slice().to_vec();
            let mut b = a.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (u(&a) - u(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "k = {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn cross_solve_matches_dense() {
        let (m, th) = ssm(8, 0.2, 6);
        let sys = StructuredSsm::new(m);
        let q0 = sys.lift(&th).unwrap();
        let qm = &q0 + DVector::from_fn(20, |i, _| 0.05 * (i as f64).cos());
        let (j0, jm) = (sys.jacobian(&q0).unwrap(), sys.jacobian(&qm).unwrap());
        let a = jm.dense() * j0.dense().transpose();
        let b = DVector::from_fn(8, |i, _| i as f64 - 2.0);
        let x = jm.cross_solve(&j0, &b).unwrap();
        assert!((a * x - b).amax() < 1e-9);
    }

    #[test]
    fn newton_projection_lands_on_the_naive_manifold() {
        let (m, th) = ssm(8, 0.1, 5);
        let dense = LiftedModel::new(m.clone());
        let sys = StructuredSsm::new(m);
        let origin = ManifoldPoint::new(&sys, sys.lift(&th).unwrap()).unwrap();
        let step = project_momentum(&DVector::from_fn(20, |i, _| ((i * 3) as f64).sin()), &origin.jacobian).unwrap();
        let q_tilde = &origin.q + step * 0.02;
        for solver in [ProjectionSolver::Newton, ProjectionSolver::SymmetricNewton] {
            let proj = project_position(&sys, &q_tilde, &origin, 1e-11, 50, solver);
            assert!(!proj.failed);
            assert!(dense.residual(&proj.point.unwrap().q).unwrap().amax() < 1e-9);
        }
    }

    #[test]
    fn block_size_two_without_global_parameters() {
        let y: Vec<f64> = (0..10).map(|i| (i as f64 * 0.4).sin()).collect();
        let sys = StructuredSsm::new(LinearSsm { y });
        assert_eq!(sys.dim(), 20);
        let q = sys.lift(&[0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.0, 0.7, 0.2, -0.3]).unwrap();
        assert!(sys.residual(&q).unwrap().amax() < 1e-12);
        let jac = sys.jacobian(&q).unwrap();
        assert_eq!(jac.u.ncols(), 0);
        let dense = jac.dense();
        let g = &dense * dense.transpose();
        let ld: f64 = g.symmetric_eigenvalues().iter().map(|v| v.ln()).sum();
        assert!((jac.log_det_gram().unwrap() - ld).abs() < 1e-8);
        // Linear constraint: the log-det term is constant.
        let grad = sys.grad_potential(&q, &jac).unwrap();
        let expect: Vec<f64> = q.iter().copied().collect();
        assert!((grad - DVector::from_vec(expect)).amax() < 1e-10);
    }

    #[test]
    fn infeasible_noise_is_a_domain_error() {
        let (m, th) = ssm(4, 0.1, 1);
        let sys = StructuredSsm::new(m);
        let mut q = sys.lift(&th).unwrap();
        q[4 + 4] = 1e6;
        assert!(matches!(sys.residual(&q), Err(Error::Domain { .. })));
    }
}
