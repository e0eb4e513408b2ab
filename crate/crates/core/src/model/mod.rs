//! Differentiable generative models `y = F(θ) + σ(θ) η`.
//!
//! A model is described by implementing [`Model`]. Its functions are generic
//! over [`Scalar`] so that the same code yields values, Jacobians and
//! second derivatives through forward-mode AD. Analytic derivatives can be
//! supplied through the `analytic_*` hooks; [`validate_derivatives`] checks
//! them against AD and both against central finite differences.

pub mod ad;
pub mod sdual;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub use ad::{Dual, Dual2, Scalar};
pub use sdual::{static_gradient, static_jacobian, static_second_order, SDual, SDual2};

use crate::error::{check_finite, Error, Result};

/// A generative model with additive noise, `y = F(θ) + σ(θ) η`.
pub trait Model: Sync {
    /// Latent dimension.
    fn dim_theta(&self) -> usize;
    /// Observation dimension.
    fn dim_y(&self) -> usize;
    /// Observed data `y`.
    fn observed(&self) -> &[f64];

    /// Forward map `F(θ)`.
    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S>;

    /// Noise scale `σ(θ) > 0`.
    fn noise_scale<S: Scalar>(&self, theta: &[S]) -> S;

    /// Negative log prior density of `θ`, up to a constant.
    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S;

    /// Negative log density of the noise, standard Gaussian by default.
    fn prior_potential_eta<S: Scalar>(&self, eta: &[S]) -> S {
        eta.iter().fold(S::constant(0.0), |acc, e| acc + e.square()) * 0.5
    }

    /// `true` if `σ` does not depend on `θ`; lets callers skip its derivatives.
    fn constant_noise(&self) -> bool {
        false
    }

    /// Draw from the prior on `θ`. Defaults to a standard normal.
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim_theta()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Analytic `DF(θ)`, if available.
    fn analytic_jacobian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic `∇σ(θ)`, if available.
    fn analytic_noise_gradient(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }

    /// Analytic `∇Φ_θ(θ)`, if available.
    fn analytic_prior_gradient(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }

    /// Analytic `∂(DF)(θ)·v`, if available.
    fn analytic_jacobian_derivative(&self, _theta: &[f64], _v: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// All second-order information at once, if a faster route than the
    /// generic [`Dual2`] pass exists (see [`static_second_order`]).
    fn analytic_second_order(&self, _theta: &[f64]) -> Option<Result<SecondOrder>> {
        None
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn dim_theta(&self) -> usize {
        (**self).dim_theta()
    }
    fn dim_y(&self) -> usize {
        (**self).dim_y()
    }
    fn observed(&self) -> &[f64] {
        (**self).observed()
    }
    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        (**self).forward(theta)
    }
    fn noise_scale<S: Scalar>(&self, theta: &[S]) -> S {
        (**self).noise_scale(theta)
    }
    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        (**self).prior_potential_theta(theta)
    }
    fn prior_potential_eta<S: Scalar>(&self, eta: &[S]) -> S {
        (**self).prior_potential_eta(eta)
    }
    fn constant_noise(&self) -> bool {
        (**self).constant_noise()
    }
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (**self).sample_prior(rng)
    }
    fn analytic_jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        (**self).analytic_jacobian(theta)
    }
    fn analytic_noise_gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        (**self).analytic_noise_gradient(theta)
    }
    fn analytic_prior_gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        (**self).analytic_prior_gradient(theta)
    }
    fn analytic_jacobian_derivative(&self, theta: &[f64], v: &[f64]) -> Option<DMatrix<f64>> {
        (**self).analytic_jacobian_derivative(theta, v)
    }
    fn analytic_second_order(&self, theta: &[f64]) -> Option<Result<SecondOrder>> {
        (**self).analytic_second_order(theta)
    }
}

fn check_theta<M: Model>(model: &M, theta: &[f64]) -> Result<()> {
    if theta.len() != model.dim_theta() {
        return Err(Error::Invalid(format!(
            "theta has length {}, model expects {}",
            theta.len(),
            model.dim_theta()
        )));
    }
    check_finite("theta", theta)
}

/// Evaluates `F(θ)`.
pub fn evaluate_forward<M: Model>(model: &M, theta: &[f64]) -> Result<DVector<f64>> {
    check_theta(model, theta)?;
    let out = model.forward(theta);
    check_finite("forward", &out)?;
    Ok(DVector::from_vec(out))
}

fn dual_jacobian(values: &[Dual], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| values[i].tangent(j))
}

/// `F(θ)` and `DF(θ)` from a single pass (or the analytic Jacobian).
pub fn forward_and_jacobian<M: Model>(model: &M, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_theta(model, theta)?;
    if let Some(jac) = model.analytic_jacobian(theta) {
        let f = evaluate_forward(model, theta)?;
        check_finite("jacobian", jac.as_slice())?;
        return Ok((f, jac));
    }
    let out = model.forward(&ad::seed_dual(theta));
    let f: Vec<f64> = out.iter().map(|d| d.value).collect();
    check_finite("forward", &f)?;
    let jac = dual_jacobian(&out, model.dim_y(), model.dim_theta());
    check_finite("jacobian", jac.as_slice())?;
    Ok((DVector::from_vec(f), jac))
}

/// `DF(θ)`, analytic if supplied and forward-mode AD otherwise.
pub fn jacobian_forward<M: Model>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    forward_and_jacobian(model, theta).map(|(_, j)| j)
}

/// `σ(θ)` and `∇σ(θ)`.
pub fn noise_scale_and_gradient<M: Model>(model: &M, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let n = theta.len();
    if model.constant_noise() {
        let s = model.noise_scale(theta);
        return positive_noise(s).map(|s| (s, DVector::zeros(n)));
    }
    if let Some(g) = model.analytic_noise_gradient(theta) {
        let s = positive_noise(model.noise_scale(theta))?;
        return Ok((s, g));
    }
    let s = model.noise_scale(&ad::seed_dual(theta));
    let sigma = positive_noise(s.value)?;
    let g = DVector::from_fn(n, |k, _| s.tangent(k));
    check_finite("noise gradient", g.as_slice())?;
    Ok((sigma, g))
}

fn positive_noise(s: f64) -> Result<f64> {
    if s.is_finite() && s > 0.0 {
        Ok(s)
    } else {
        Err(Error::Domain { what: "noise scale", index: 0 })
    }
}

/// `∇Φ_θ(θ)`.
pub fn prior_gradient<M: Model>(model: &M, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let value = model.prior_potential_theta(theta);
    check_finite("prior potential", &[value])?;
    if let Some(g) = model.analytic_prior_gradient(theta) {
        return Ok((value, g));
    }
    let d = model.prior_potential_theta(&ad::seed_dual(theta));
    let g = DVector::from_fn(theta.len(), |k, _| d.tangent(k));
    check_finite("prior gradient", g.as_slice())?;
    Ok((value, g))
}

/// Second-order information on `F` and `σ` at one `θ`.
#[derive(Clone, Debug)]
pub struct SecondOrder {
    pub forward: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// `hessians[i]` is the Hessian of `F_i`.
    pub hessians: Vec<DMatrix<f64>>,
    pub sigma: f64,
    pub sigma_gradient: DVector<f64>,
    pub sigma_hessian: DMatrix<f64>,
}

/// Evaluates `F`, `DF`, `∂²F_i`, `σ`, `∇σ` and `∂²σ` with one second-order pass.
pub fn second_order<M: Model>(model: &M, theta: &[f64]) -> Result<SecondOrder> {
    check_theta(model, theta)?;
    if let Some(so) = model.analytic_second_order(theta) {
        return so;
    }
    let n = theta.len();
    let seeded = ad::seed_dual2(theta);
    let out = model.forward(&seeded);
    let forward = DVector::from_iterator(out.len(), out.iter().map(|d| d.value));
    check_finite("forward", forward.as_slice())?;
    let jacobian = DMatrix::from_fn(out.len(), n, |i, j| out[i].grad.get(j).copied().unwrap_or(0.0));
    let hessians: Vec<DMatrix<f64>> = out.iter().map(|d| d.hessian(n)).collect();
    for h in &hessians {
        check_finite("forward hessian", h.as_slice())?;
    }
    let (sigma, sigma_gradient, sigma_hessian) = if model.constant_noise() {
        (positive_noise(model.noise_scale(theta))?, DVector::zeros(n), DMatrix::zeros(n, n))
    } else {
        let s = model.noise_scale(&seeded);
        (positive_noise(s.value)?, DVector::from_vec(s.gradient(n)), s.hessian(n))
    };
    Ok(SecondOrder { forward, jacobian, hessians, sigma, sigma_gradient, sigma_hessian })
}

/// Directional derivative of the Jacobian, `∂(DF)(θ)·v`.
pub fn directional_jacobian_derivative<M: Model>(model: &M, theta: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
    check_theta(model, theta)?;
    check_finite("direction", v)?;
    if let Some(d) = model.analytic_jacobian_derivative(theta, v) {
        return Ok(d);
    }
    let so = second_order(model, theta)?;
    let v = DVector::from_column_slice(v);
    let mut out = DMatrix::zeros(model.dim_y(), model.dim_theta());
    for (i, h) in so.hessians.iter().enumerate() {
        out.row_mut(i).copy_from(&(h * &v).transpose());
    }
    check_finite("jacobian derivative", out.as_slice())?;
    Ok(out)
}

/// Negative log posterior in `θ` space,
/// `Φ_θ(θ) + Φ_η((y − F(θ))/σ(θ)) + d_Y log σ(θ)`.
pub fn neg_log_posterior<M: Model, S: Scalar>(model: &M, theta: &[S]) -> S {
    let f = model.forward(theta);
    let sigma = model.noise_scale(theta);
    let inv = sigma.recip();
    let eta: Vec<S> = model
        .observed()
        .iter()
        .zip(f)
        .map(|(&y, fi)| (-(fi - y)) * inv.clone())
        .collect();
    model.prior_potential_theta(theta) + model.prior_potential_eta(&eta) + sigma.ln() * model.dim_y() as f64
}

/// Central finite-difference step `cbrt(ε_mach)·max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian<F>(f: F, x: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let base = f(x);
    let mut jac = DMatrix::zeros(base.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..base.len() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Largest entrywise discrepancy scaled by `max(1, max|reference|)`.
pub fn relative_discrepancy(candidate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    if candidate.shape() != reference.shape() {
        return f64::INFINITY;
    }
    let scale = reference.amax().max(1.0);
    (candidate - reference).amax() / scale
}

/// One derivative comparison inside a [`ValidationReport`].
#[derive(Clone, Debug, serde::Serialize)]
pub struct DerivativeCheck {
    pub name: String,
    pub discrepancy: f64,
    pub tolerance: f64,
}

impl DerivativeCheck {
    pub fn passed(&self) -> bool {
        self.discrepancy <= self.tolerance
    }
}

/// Outcome of [`validate_derivatives`] at one `θ`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ValidationReport {
    pub theta: Vec<f64>,
    pub checks: Vec<DerivativeCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(DerivativeCheck::passed)
    }
}

/// Compares AD derivatives against central finite differences and any
/// analytic overrides against AD, at relative tolerance `tol`.
pub fn validate_derivatives<M: Model>(model: &M, theta: &[f64], tol: f64) -> Result<ValidationReport> {
    check_theta(model, theta)?;
    let n = theta.len();
    let mut checks = Vec::new();
    let mut push = |name: &str, a: &DMatrix<f64>, b: &DMatrix<f64>| {
        checks.push(DerivativeCheck { name: name.to_string(), discrepancy: relative_discrepancy(a, b), tolerance: tol });
    };

    let ad_out = model.forward(&ad::seed_dual(theta));
    let ad_jac = dual_jacobian(&ad_out, model.dim_y(), n);
    let fd_jac = finite_difference_jacobian(|x| model.forward(x), theta);
    push("jacobian: ad vs finite differences", &ad_jac, &fd_jac);
    if let Some(analytic) = model.analytic_jacobian(theta) {
        push("jacobian: analytic vs ad", &analytic, &ad_jac);
    }

    let sigma_ad = model.noise_scale(&ad::seed_dual(theta));
    let sigma_ad = DMatrix::from_fn(1, n, |_, k| sigma_ad.tangent(k));
    let sigma_fd = finite_difference_jacobian(|x| vec![model.noise_scale(x)], theta);
    push("noise scale gradient: ad vs finite differences", &sigma_ad, &sigma_fd);
    if let Some(g) = model.analytic_noise_gradient(theta) {
        push("noise scale gradient: analytic vs ad", &DMatrix::from_row_slice(1, n, g.as_slice()), &sigma_ad);
    }

    let prior_ad = model.prior_potential_theta(&ad::seed_dual(theta));
    let prior_ad = DMatrix::from_fn(1, n, |_, k| prior_ad.tangent(k));
    let prior_fd = finite_difference_jacobian(|x| vec![model.prior_potential_theta(x)], theta);
    push("prior gradient: ad vs finite differences", &prior_ad, &prior_fd);
    if let Some(g) = model.analytic_prior_gradient(theta) {
        push("prior gradient: analytic vs ad", &DMatrix::from_row_slice(1, n, g.as_slice()), &prior_ad);
    }

    // Second derivatives along a fixed pseudo-random direction.
    let v: Vec<f64> = (0..n).map(|k| ((k as f64 + 1.0) * 0.754877666).sin()).collect();
    let so = second_order(model, theta)?;
    let vv = DVector::from_column_slice(&v);
    let ad_dir = DMatrix::from_fn(model.dim_y(), n, |i, j| (so.hessians[i].row(j) * &vv)[0]);
    // Fourth-order stencil: the first-order one is too coarse for stiff models.
    let fd_dir = {
        let h = fd_step(theta.iter().fold(0.0_f64, |m, t| m.max(t.abs())));
        let jac_at = |c: f64| {
            let x: Vec<f64> = theta.iter().zip(&v).map(|(t, vk)| t + c * h * vk).collect();
            dual_jacobian(&model.forward(&ad::seed_dual(&x)), model.dim_y(), n)
        };
        (jac_at(-2.0) - jac_at(2.0) + (jac_at(1.0) - jac_at(-1.0)) * 8.0) / (12.0 * h)
    };
    push("jacobian derivative: ad vs finite differences", &ad_dir, &fd_dir);
    if let Some(analytic) = model.analytic_jacobian_derivative(theta, &v) {
        push("jacobian derivative: analytic vs ad", &analytic, &ad_dir);
    }

    if let Some(fast) = model.analytic_second_order(theta) {
        let fast = fast?;
        let generic = model.forward(&ad::seed_dual2(theta));
        let worst = generic
            .iter()
            .zip(&fast.hessians)
            .map(|(g, h)| relative_discrepancy(h, &g.hessian(n)))
            .fold(0.0, f64::max);
        checks.push(DerivativeCheck { name: "second order: analytic vs ad".into(), discrepancy: worst, tolerance: tol });
    }

    Ok(ValidationReport { theta: theta.to_vec(), checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{LinearGaussianModel, ToyLoopModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn toy_forward_values() {
        let m = ToyLoopModel::new(0.5);
        assert_eq!(evaluate_forward(&m, &[0.0, 1.0]).unwrap()[0], 1.0);
        assert_eq!(evaluate_forward(&m, &[0.0, 0.0]).unwrap()[0], 0.0);
        assert_eq!(evaluate_forward(&m, &[1.0, 0.0]).unwrap()[0], 0.5);
    }

    #[test]
    fn toy_jacobian_values() {
        let m = ToyLoopModel::new(0.5);
        let j0 = jacobian_forward(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(j0.as_slice(), &[0.0, 0.0]);
        let j = jacobian_forward(&m, &[1.0, 1.0]).unwrap();
        // Central differences with h = 1e-5 give [3, 2] (frozen from the oracle below).
        let fd = |x: &[f64]| m.forward(x)[0];
        let h = 1e-5;
        let d0 = (fd(&[1.0 + h, 1.0]) - fd(&[1.0 - h, 1.0])) / (2.0 * h);
        let d1 = (fd(&[1.0, 1.0 + h]) - fd(&[1.0, 1.0 - h])) / (2.0 * h);
        assert!((d0 - 3.0).abs() < 1e-8 && (d1 - 2.0).abs() < 1e-8);
        assert_relative_eq!(j[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(j[(0, 1)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_jacobian_is_matrix() {
        let mat = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let m = LinearGaussianModel::new(mat.clone(), DVector::from_vec(vec![0.1, 0.2]), 0.3, vec![1.0, 2.0]);
        for theta in [[0.0, 0.0, 0.0], [1.0, -3.0, 2.5]] {
            assert_eq!(jacobian_forward(&m, &theta).unwrap(), mat);
            let d = directional_jacobian_derivative(&m, &theta, &[0.3, 1.0, -2.0]).unwrap();
            assert_eq!(d, DMatrix::zeros(2, 3));
        }
    }

    #[test]
    fn toy_directional_jacobian_derivative() {
        let m = ToyLoopModel::new(0.5);
        let d = directional_jacobian_derivative(&m, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        // ∂²F/∂θ₀² = 12θ₀² − 1 = 11 at θ₀ = 1, confirmed by a finite difference
        // of jacobian_forward with h = 1e-5.
        let h = 1e-5;
        let jp = jacobian_forward(&m, &[1.0 + h, 0.0]).unwrap();
        let jm = jacobian_forward(&m, &[1.0 - h, 0.0]).unwrap();
        let fd = (jp - jm) / (2.0 * h);
        assert!((fd[(0, 0)] - 11.0).abs() < 1e-6 && fd[(0, 1)].abs() < 1e-9);
        assert_relative_eq!(d[(0, 0)], 11.0, epsilon = 1e-12);
        assert_relative_eq!(d[(0, 1)], 0.0, epsilon = 1e-12);
        let z = directional_jacobian_derivative(&m, &[0.3, -0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(z, DMatrix::zeros(1, 2));
    }

    #[test]
    fn non_finite_forward_reports_index() {
        struct Blowup;
        impl Model for Blowup {
            fn dim_theta(&self) -> usize {
                1
            }
            fn dim_y(&self) -> usize {
                2
            }
            fn observed(&self) -> &[f64] {
                &[0.0, 0.0]
            }
            fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
                vec![theta[0].clone(), theta[0].recip()]
            }
            fn noise_scale<S: Scalar>(&self, _theta: &[S]) -> S {
                S::constant(1.0)
            }
            fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
                theta[0].square() * 0.5
            }
        }
        match evaluate_forward(&Blowup, &[0.0]) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
        assert!(matches!(jacobian_forward(&Blowup, &[0.0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = ToyLoopModel::new(0.1);
        let a = evaluate_forward(&m, &[0.123, -0.456]).unwrap();
        let b = evaluate_forward(&m, &[0.123, -0.456]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ad_jacobian_matches_finite_differences(a in -1.5f64..1.5, b in -1.5f64..1.5) {
            let m = ToyLoopModel::new(0.2);
            let report = validate_derivatives(&m, &[a, b], 1e-6).unwrap();
            prop_assert!(report.passed(), "{:?}", report);
        }

        #[test]
        fn jacobian_derivative_is_linear_in_direction(
            a in -1.5f64..1.5, b in -1.5f64..1.5,
            v in proptest::array::uniform2(-2.0f64..2.0),
            w in proptest::array::uniform2(-2.0f64..2.0),
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
        ) {
            let m = ToyLoopModel::new(0.2);
            let th = [a, b];
            let combo = [alpha * v[0] + beta * w[0], alpha * v[1] + beta * w[1]];
            let lhs = directional_jacobian_derivative(&m, &th, &combo).unwrap();
            let rhs = directional_jacobian_derivative(&m, &th, &v).unwrap() * alpha
                + directional_jacobian_derivative(&m, &th, &w).unwrap() * beta;
            prop_assert!((lhs - rhs).amax() <= 1e-10);
        }
    }
}
