use std::cell::OnceCell;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{cholesky, spd_log_det, ConstraintJacobian, ConstraintSystem};
use crate::error::{check_finite, Error, Result};
use crate::model::{self, ad, Model};

/// How the `d_Y × d_Y` Gram matrix is factorized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramPath {
    /// Woodbury form whenever `d_Y > d_Θ`.
    #[default]
    Auto,
    Dense,
    Woodbury,
}

/// The posterior of a [`Model`] lifted to `q = (θ, η)` on
/// `M = {F(θ) + σ(θ) η = y}`, with potential
/// `Φ_θ(θ) + Φ_η(η) + ½ log det G(q)`.
#[derive(Clone, Debug)]
pub struct LiftedModel<M> {
    pub model: M,
    pub gram_path: GramPath,
}

impl<M: Model> LiftedModel<M> {
    pub fn new(model: M) -> Self {
        Self { model, gram_path: GramPath::Auto }
    }

    pub fn with_gram_path(mut self, path: GramPath) -> Self {
        self.gram_path = path;
        self
    }

    fn use_woodbury(&self) -> bool {
        match self.gram_path {
            GramPath::Auto => self.model.dim_y() > self.model.dim_theta(),
            GramPath::Dense => false,
            GramPath::Woodbury => true,
        }
    }

    pub fn theta<'a>(&self, q: &'a DVector<f64>) -> &'a [f64] {
        &q.as_slice()[..self.model.dim_theta()]
    }

    pub fn eta<'a>(&self, q: &'a DVector<f64>) -> &'a [f64] {
        &q.as_slice()[self.model.dim_theta()..]
    }

    /// The unique manifold point above `θ`, `(θ, (y − F(θ))/σ(θ))`.
    pub fn lift(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let f = model::evaluate_forward(&self.model, theta)?;
        let (sigma, _) = model::noise_scale_and_gradient(&self.model, theta)?;
        let mut q = DVector::zeros(self.dim());
        q.rows_mut(0, theta.len()).copy_from_slice(theta);
        for (i, &y) in self.model.observed().iter().enumerate() {
            q[theta.len() + i] = (y - f[i]) / sigma;
        }
        Ok(q)
    }

    fn jacobian_from(&self, eta: &[f64], df: DMatrix<f64>, sigma: f64, dsigma: DVector<f64>) -> LiftedJacobian {
        let mut a = df;
        if !self.model.constant_noise() {
            for (i, e) in eta.iter().enumerate() {
                for j in 0..a.ncols() {
                    a[(i, j)] += e * dsigma[j];
                }
            }
        }
        LiftedJacobian {
            a,
            sigma,
            sigma_gradient: dsigma,
            use_woodbury: self.use_woodbury(),
            factor: OnceCell::new(),
        }
    }

    /// `Hᵢ[j,k] = ∂²Fᵢ/∂θⱼ∂θₖ` and the Hessian of `σ`.
    fn second_derivatives(&self, theta: &[f64]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        let n = theta.len();
        let analytic = if self.model.constant_noise() {
            let e0: Vec<f64> = (0..n).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
            self.model.analytic_jacobian_derivative(theta, &e0).map(|first| {
                let mut hess = vec![DMatrix::zeros(n, n); self.model.dim_y()];
                for k in 0..n {
                    let dk = if k == 0 {
                        first.clone()
                    } else {
                        let ek: Vec<f64> = (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect();
                        self.model.analytic_jacobian_derivative(theta, &ek).expect("analytic derivative")
                    };
                    for (i, h) in hess.iter_mut().enumerate() {
                        for j in 0..n {
                            h[(j, k)] = dk[(i, j)];
                        }
                    }
                }
                hess
            })
        } else {
            None
        };
        match analytic {
            Some(h) => Ok((h, DMatrix::zeros(n, n))),
            None => {
                let so = model::second_order(&self.model, theta)?;
                Ok((so.hessians, so.sigma_hessian))
            }
        }
    }
}

impl<M: Model> ConstraintSystem for LiftedModel<M> {
    type Jacobian = LiftedJacobian;

    fn dim(&self) -> usize {
        self.model.dim_theta() + self.model.dim_y()
    }

    fn n_constraints(&self) -> usize {
        self.model.dim_y()
    }

    fn residual(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let theta = self.theta(q);
        let f = model::evaluate_forward(&self.model, theta)?;
        let sigma = self.model.noise_scale(theta);
        let mut c = f;
        for (i, (&e, &y)) in self.eta(q).iter().zip(self.model.observed()).enumerate() {
            c[i] += sigma * e - y;
        }
        check_finite("constraint", c.as_slice())?;
        Ok(c)
    }

    fn jacobian(&self, q: &DVector<f64>) -> Result<LiftedJacobian> {
        self.residual_and_jacobian(q).map(|(_, j)| j)
    }

    fn residual_and_jacobian(&self, q: &DVector<f64>) -> Result<(DVector<f64>, LiftedJacobian)> {
        let theta = self.theta(q);
        let eta = self.eta(q);
        let (f, df) = model::forward_and_jacobian(&self.model, theta)?;
        let (sigma, dsigma) = model::noise_scale_and_gradient(&self.model, theta)?;
        let mut c = f;
        for (i, (&e, &y)) in eta.iter().zip(self.model.observed()).enumerate() {
            c[i] += sigma * e - y;
        }
        check_finite("constraint", c.as_slice())?;
        Ok((c, self.jacobian_from(eta, df, sigma, dsigma)))
    }

    fn potential(&self, q: &DVector<f64>, jac: &LiftedJacobian) -> Result<f64> {
        let u = self.model.prior_potential_theta(self.theta(q))
            + self.model.prior_potential_eta(self.eta(q))
            + 0.5 * jac.log_det_gram()?;
        check_finite("potential", &[u])?;
        Ok(u)
    }

    fn grad_potential(&self, q: &DVector<f64>, jac: &LiftedJacobian) -> Result<DVector<f64>> {
        let theta = self.theta(q);
        let eta = self.eta(q);
        let (dt, dy) = (theta.len(), eta.len());
        let mut g = DVector::zeros(dt + dy);

        let (_, prior_theta) = model::prior_gradient(&self.model, theta)?;
        g.rows_mut(0, dt).copy_from(&prior_theta);
        let pe = self.model.prior_potential_eta(&ad::seed_dual(eta));
        for i in 0..dy {
            g[dt + i] = pe.tangent(i);
        }

        // ∂ₖ ½ log det G = Σᵢⱼ Wᵢⱼ ∂ₖAᵢⱼ + σ ∂ₖσ tr(G⁻¹), W = G⁻¹A.
        let w = jac.gram_inverse_times_a()?;
        let (hessians, sigma_hessian) = self.second_derivatives(theta)?;
        for (i, h) in hessians.iter().enumerate() {
            let row = w.row(i);
            for k in 0..dt {
                let mut acc = 0.0;
                for j in 0..dt {
                    acc += row[j] * h[(j, k)];
                }
                g[k] += acc;
            }
        }
        if !self.model.constant_noise() {
            let eta_w = w.tr_mul(&DVector::from_column_slice(eta));
            let hs = &sigma_hessian * eta_w;
            let tr = jac.trace_gram_inverse()?;
            for k in 0..dt {
                g[k] += hs[k] + jac.sigma * tr * jac.sigma_gradient[k];
            }
            let w_ds = &w * &jac.sigma_gradient;
            for i in 0..dy {
                g[dt + i] += w_ds[i];
            }
        }
        check_finite("potential gradient", g.as_slice())?;
        Ok(g)
    }

    fn state<'a>(&self, q: &'a DVector<f64>) -> &'a [f64] {
        self.theta(q)
    }

    fn lift_state(&self, state: &[f64]) -> Result<DVector<f64>> {
        self.lift(state)
    }
}

/// Factorization behind a [`LiftedJacobian`].
#[derive(Clone, Debug)]
pub enum GramFactor {
    /// Cholesky of `G = AAᵀ + σ²I`.
    Dense(Cholesky<f64, Dyn>),
    /// Cholesky of `K = σ²I + AᵀA` (`d_Θ × d_Θ`).
    Woodbury(Cholesky<f64, Dyn>),
}

/// `DC = [A, σI]` with `A = DF(θ) + η Dσ(θ)ᵀ`.
#[derive(Clone, Debug)]
pub struct LiftedJacobian {
    pub a: DMatrix<f64>,
    pub sigma: f64,
    pub sigma_gradient: DVector<f64>,
    use_woodbury: bool,
    factor: OnceCell<Option<GramFactor>>,
}

impl LiftedJacobian {
    /// The full `d_Y × (d_Θ + d_Y)` matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let (m, n) = self.a.shape();
        let mut dc = DMatrix::zeros(m, n + m);
        dc.view_mut((0, 0), (m, n)).copy_from(&self.a);
        for i in 0..m {
            dc[(i, n + i)] = self.sigma;
        }
        dc
    }

    /// The dense Gram matrix `AAᵀ + σ²I`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.a.nrows();
        &self.a * self.a.transpose() + DMatrix::identity(m, m) * (self.sigma * self.sigma)
    }

    pub fn uses_woodbury(&self) -> bool {
        self.use_woodbury
    }

    pub fn factor(&self) -> Result<&GramFactor> {
        self.factor
            .get_or_init(|| {
                let s2 = self.sigma * self.sigma;
                if self.use_woodbury {
                    let n = self.a.ncols();
                    let k = self.a.tr_mul(&self.a) + DMatrix::identity(n, n) * s2;
                    cholesky(k, "K").ok().map(GramFactor::Woodbury)
                } else {
                    cholesky(self.gram(), "G").ok().map(GramFactor::Dense)
                }
            })
            .as_ref()
            .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))
    }

    /// `G⁻¹ A`.
    pub fn gram_inverse_times_a(&self) -> Result<DMatrix<f64>> {
        Ok(match self.factor()? {
            GramFactor::Dense(chol) => chol.solve(&self.a),
            // G⁻¹A = σ⁻²(A − A K⁻¹ AᵀA) = A K⁻¹.
            GramFactor::Woodbury(chol) => chol.solve(&self.a.transpose()).transpose(),
        })
    }

    /// `tr(G⁻¹)`.
    pub fn trace_gram_inverse(&self) -> Result<f64> {
        Ok(match self.factor()? {
            GramFactor::Dense(chol) => chol.inverse().trace(),
            GramFactor::Woodbury(chol) => {
                let (m, n) = self.a.shape();
                (m - n) as f64 / (self.sigma * self.sigma) + chol.inverse().trace()
            }
        })
    }
}

impl ConstraintJacobian for LiftedJacobian {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.a.ncols();
        &self.a * v.rows(0, n) + v.rows(n, self.a.nrows()) * self.sigma
    }

    fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let (m, n) = self.a.shape();
        let mut out = DVector::zeros(n + m);
        out.rows_mut(0, n).copy_from(&self.a.tr_mul(lambda));
        out.rows_mut(n, m).copy_from(&(lambda * self.sigma));
        out
    }

    fn gram_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(match self.factor()? {
            GramFactor::Dense(chol) => chol.solve(b),
            GramFactor::Woodbury(chol) => {
                let inner = chol.solve(&self.a.tr_mul(b));
                (b - &self.a * inner) / (self.sigma * self.sigma)
            }
        })
    }

    fn log_det_gram(&self) -> Result<f64> {
        Ok(match self.factor()? {
            GramFactor::Dense(chol) => spd_log_det(chol),
            GramFactor::Woodbury(chol) => {
                let (m, n) = self.a.shape();
                (m - n) as f64 * (self.sigma * self.sigma).ln() + spd_log_det(chol)
            }
        })
    }

    fn cross_solve(&self, origin: &Self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.sigma * origin.sigma;
        let singular = || Error::Numerical("singular cross Gram matrix".into());
        if self.use_woodbury {
            // (s I + A_m A_0ᵀ)⁻¹ b = (b − A_m (s I + A_0ᵀ A_m)⁻¹ A_0ᵀ b) / s.
            let n = self.a.ncols();
            let small = origin.a.tr_mul(&self.a) + DMatrix::identity(n, n) * s;
            let inner = small.lu().solve(&origin.a.tr_mul(b)).ok_or_else(singular)?;
            Ok((b - &self.a * inner) / s)
        } else {
            let m = self.a.nrows();
            let cross = &self.a * origin.a.transpose() + DMatrix::identity(m, m) * s;
            cross.lu().solve(b).ok_or_else(singular)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldPoint;
    use crate::zoo::{LinearGaussianModel, ToyLoopModel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    /// `y = F(θ) + exp(θ₀/2) η` with `d_Y = 4`, `d_Θ = 2`: both noise and
    /// dimension structure exercised.
    #[derive(Clone)]
    struct Heteroscedastic {
        y: Vec<f64>,
    }

    impl Model for Heteroscedastic {
        fn dim_theta(&self) -> usize {
            2
        }
        fn dim_y(&self) -> usize {
            4
        }
        fn observed(&self) -> &[f64] {
            &self.y
        }
        fn forward<S: crate::model::Scalar>(&self, t: &[S]) -> Vec<S> {
            vec![
                t[0].sin() * t[1].clone(),
                t[0].square() + t[1].clone(),
                (t[1].clone() * 0.5).exp(),
                t[0].clone() * t[1].clone() * t[1].clone(),
            ]
        }
        fn noise_scale<S: crate::model::Scalar>(&self, t: &[S]) -> S {
            (t[0].clone() * 0.5).exp() * 0.3
        }
        fn prior_potential_theta<S: crate::model::Scalar>(&self, t: &[S]) -> S {
            (t[0].square() + t[1].square()) * 0.5
        }
    }

    fn hetero() -> Heteroscedastic {
        Heteroscedastic { y: vec![0.2, 1.1, 0.9, -0.3] }
    }

    #[test]
    fn constraint_examples() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.5));
        let c = sys.residual(&DVector::from_vec(vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(c[0], 0.0);
        let c = sys.residual(&DVector::from_vec(vec![0.0, 0.0, 2.0])).unwrap();
        assert_eq!(c[0], 0.0);
        let h = LiftedModel::new(hetero());
        let q = h.lift(&[0.4, -0.7]).unwrap();
        assert!(h.residual(&q).unwrap().amax() < 1e-14);
    }

    #[test]
    fn toy_jacobian_and_gram() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.1));
        let q = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let jac = sys.jacobian(&q).unwrap();
        let dc = jac.dense();
        assert_relative_eq!(dc, DMatrix::from_row_slice(1, 3, &[3.0, 2.0, 0.1]), epsilon = 1e-14);
        let fd = crate::model::finite_difference_jacobian(|x| sys.residual(&DVector::from_column_slice(x)).unwrap().data.into(), q.as_slice());
        assert!((&fd - &dc).amax() < 1e-8);
        assert_relative_eq!(jac.gram()[(0, 0)], 13.01, epsilon = 1e-12);
        let u = sys.potential(&q, &jac).unwrap();
        assert_relative_eq!(u, 1.0 + 0.5 * 13.01f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn constant_forward_gives_identity_gram_and_zero_potential() {
        let m = LinearGaussianModel::new(DMatrix::zeros(3, 2), DVector::zeros(3), 1.0, vec![0.0; 3]);
        let sys = LiftedModel::new(m);
        let q = DVector::zeros(5);
        let jac = sys.jacobian(&q).unwrap();
        assert_eq!(jac.gram(), DMatrix::identity(3, 3));
        assert_eq!(sys.potential(&q, &jac).unwrap(), 0.0);
        assert_eq!(jac.dense().columns(2, 3).into_owned(), DMatrix::identity(3, 3));
    }

    #[test]
    fn linear_gaussian_gram_and_flat_log_det() {
        let mat = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 2.0, 0.0, 0.3]);
        let m = LinearGaussianModel::new(mat.clone(), DVector::from_vec(vec![0.1, -0.2]), 0.4, vec![1.0, 0.5]);
        let sys = LiftedModel::new(m);
        let expect = &mat * mat.transpose() + DMatrix::identity(2, 2) * 0.16;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut offset = None;
        for _ in 0..5 {
            let q = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let jac = sys.jacobian(&q).unwrap();
            assert_relative_eq!(jac.gram(), expect, epsilon = 1e-14);
            let u = sys.potential(&q, &jac).unwrap() - 0.5 * q.norm_squared();
            let o = *offset.get_or_insert(u);
            assert_relative_eq!(u, o, epsilon = 1e-12);
            let g = sys.grad_potential(&q, &jac).unwrap();
            assert_relative_eq!(g, q, epsilon = 1e-12);
        }
    }

    fn fd_gradient<S: ConstraintSystem>(sys: &S, q: &DVector<f64>) -> DVector<f64> {
        let u = |x: &[f64]| {
            let x = DVector::from_column_slice(x);
            let j = sys.jacobian(&x).unwrap();
            vec![sys.potential(&x, &j).unwrap()]
        };
        crate::model::finite_difference_jacobian(u, q.as_slice()).row(0).transpose()
    }

    #[test]
    fn toy_gradient_matches_finite_differences() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.2));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-1.5..1.5));
            let pt = ManifoldPoint::new(&sys, q.clone()).unwrap();
            let g = pt.grad_potential(&sys).unwrap();
            let fd = fd_gradient(&sys, &q);
            let rel = (g - &fd).amax() / fd.amax().max(1.0);
            assert!(rel < 1e-6, "relative error {rel}");
            // Constant σ: the log-det term does not depend on η.
            assert_eq!(g[2], q[2]);
        }
    }

    #[test]
    fn heteroscedastic_gradient_matches_finite_differences_on_both_paths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for path in [GramPath::Dense, GramPath::Woodbury] {
            let sys = LiftedModel::new(hetero()).with_gram_path(path);
            for _ in 0..10 {
                let q = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
                let jac = sys.jacobian(&q).unwrap();
                let g = sys.grad_potential(&q, &jac).unwrap();
                let fd = fd_gradient(&sys, &q);
                let rel = (&g - &fd).amax() / fd.amax().max(1.0);
                assert!(rel < 1e-6, "{path:?}: relative error {rel}");
            }
        }
    }

    #[test]
    fn woodbury_matches_dense_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dense = LiftedModel::new(hetero()).with_gram_path(GramPath::Dense);
        let wood = LiftedModel::new(hetero()).with_gram_path(GramPath::Woodbury);
        for _ in 0..20 {
            let q = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let q0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let (jd, jw) = (dense.jacobian(&q).unwrap(), wood.jacobian(&q).unwrap());
            let (jd0, jw0) = (dense.jacobian(&q0).unwrap(), wood.jacobian(&q0).unwrap());
            assert!(jw.uses_woodbury() && !jd.uses_woodbury());
            let xd = jd.gram_solve(&b).unwrap();
            let xw = jw.gram_solve(&b).unwrap();
            assert!((&xd - &xw).amax() < 1e-8 * xd.amax().max(1.0));
            assert_relative_eq!(jd.log_det_gram().unwrap(), jw.log_det_gram().unwrap(), epsilon = 1e-10);
            assert_relative_eq!(jd.trace_gram_inverse().unwrap(), jw.trace_gram_inverse().unwrap(), epsilon = 1e-8, max_relative = 1e-10);
            let cd = jd.cross_solve(&jd0, &b).unwrap();
            let cw = jw.cross_solve(&jw0, &b).unwrap();
            assert!((&cd - &cw).amax() < 1e-8 * cd.amax().max(1.0));
            let direct = (jd.dense() * jd0.dense().transpose()).lu().solve(&b).unwrap();
            assert!((&cd - direct).amax() < 1e-8 * cd.amax().max(1.0));
        }
    }
}
