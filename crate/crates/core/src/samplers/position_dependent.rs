use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{standard_normal_vector, RejectReason, Sampler, Target, TransitionStats};
use crate::error::{Error, Result};
use crate::model::{self, Model};

/// A positive-definite matrix field `θ ↦ M(θ)`.
pub trait MetricField: Sync {
    fn metric(&self, theta: &[f64]) -> Result<DMatrix<f64>>;
    /// `M(θ)` and its partial derivatives `∂ₖM(θ)`.
    fn metric_and_derivatives(&self, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)>;
}

/// `M(θ) = I + σ(θ)⁻² DF(θ)ᵀ DF(θ)`, the Fisher information plus the
/// standard normal prior precision.
#[derive(Clone, Debug)]
pub struct FisherMetric<M>(pub M);

impl<M: Model> MetricField for FisherMetric<M> {
    fn metric(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let df = model::jacobian_forward(&self.0, theta)?;
        let (sigma, _) = model::noise_scale_and_gradient(&self.0, theta)?;
        let n = theta.len();
        Ok(DMatrix::identity(n, n) + df.tr_mul(&df) / (sigma * sigma))
    }

    fn metric_and_derivatives(&self, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let so = model::second_order(&self.0, theta)?;
        let n = theta.len();
        let s2 = so.sigma * so.sigma;
        let ftf = so.jacobian.tr_mul(&so.jacobian);
        let m = DMatrix::identity(n, n) + &ftf / s2;
        let derivs = (0..n)
            .map(|k| {
                let dk = DMatrix::from_fn(so.jacobian.nrows(), n, |i, j| so.hessians[i][(j, k)]);
                let sym = dk.tr_mul(&so.jacobian);
                (&sym + sym.transpose()) / s2 - &ftf * (2.0 * so.sigma_gradient[k] / (s2 * so.sigma))
            })
            .collect();
        Ok((m, derivs))
    }
}

type MatrixFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Sync + Send>;
type DerivFn = Box<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Sync + Send>;

/// A metric field given by closures for `M` and `∂ₖM`.
pub struct FnMetric {
    metric: MatrixFn,
    derivatives: DerivFn,
}

impl FnMetric {
    pub fn new(
        metric: impl Fn(&[f64]) -> DMatrix<f64> + Sync + Send + 'static,
        derivatives: impl Fn(&[f64]) -> Vec<DMatrix<f64>> + Sync + Send + 'static,
    ) -> Self {
        Self { metric: Box::new(metric), derivatives: Box::new(derivatives) }
    }

    /// The constant identity metric.
    pub fn identity(n: usize) -> Self {
        Self::new(move |_| DMatrix::identity(n, n), move |_| vec![DMatrix::zeros(n, n); n])
    }
}

impl MetricField for FnMetric {
    fn metric(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.metric)(theta))
    }
    fn metric_and_derivatives(&self, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        Ok(((self.metric)(theta), (self.derivatives)(theta)))
    }
}

/// Drift used by the position-dependent MALA proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMalaVariant {
    /// `−(ε²/2) M⁻¹ ∇Φ`.
    Simple,
    /// `−(ε²/2) M⁻¹ (∇Φ + Ξ)` with `Ξᵢ = Σⱼₖ ∂ₖMᵢⱼ M⁻¹ⱼₖ`.
    Corrected,
}

/// State of a position-dependent kernel: everything the proposal density
/// at `x` needs.
#[derive(Clone, Debug)]
pub struct PdState {
    pub x: DVector<f64>,
    pub potential: f64,
    /// `d` with proposal mean `x − (ε²/2) d`; zero for the random walk.
    drift: DVector<f64>,
    /// Lower Cholesky factor of `M(x)`.
    chol: DMatrix<f64>,
    log_det: f64,
}

/// Kinds of proposal shared by [`PdMala`] and [`PdRwm`].
#[derive(Clone, Copy)]
enum Drift {
    None,
    Mala(PdMalaVariant),
}

fn build_state<T: Target, G: MetricField>(target: &T, field: &G, drift: Drift, x: DVector<f64>) -> Result<PdState> {
    let (potential, m, drift) = match drift {
        Drift::None => (target.potential(x.as_slice())?, field.metric(x.as_slice())?, None),
        Drift::Mala(PdMalaVariant::Simple) => {
            let (u, g) = target.potential_and_gradient(x.as_slice())?;
            (u, field.metric(x.as_slice())?, Some(g))
        }
        Drift::Mala(PdMalaVariant::Corrected) => {
            let (u, g) = target.potential_and_gradient(x.as_slice())?;
            let (m, dm) = field.metric_and_derivatives(x.as_slice())?;
            let inv = m.clone().cholesky().ok_or_else(not_pd)?.inverse();
            let mut g = g;
            for (k, dmk) in dm.iter().enumerate() {
                g += (dmk * &inv).column(k);
            }
            (u, m, Some(g))
        }
    };
    let chol = m.cholesky().ok_or_else(not_pd)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let drift = match drift {
        Some(g) => chol.solve(&g),
        None => DVector::zeros(x.len()),
    };
    Ok(PdState { x, potential, drift, chol: chol.l(), log_det })
}

fn not_pd() -> Error {
    Error::Numerical("metric is not positive definite".into())
}

/// `log q(to | from)` up to an ε-dependent constant.
fn log_proposal(to: &DVector<f64>, from: &PdState, eps: f64) -> f64 {
    let r = to - &from.x + &from.drift * (0.5 * eps * eps);
    let q = from.chol.tr_mul(&r).norm_squared();
    // A zero step proposes `from` itself; skip the 0/0.
    let quad = if q == 0.0 { 0.0 } else { q / (2.0 * eps * eps) };
    0.5 * from.log_det - quad
}

fn pd_transition<T: Target, G: MetricField, R: Rng + ?Sized>(
    target: &T,
    field: &G,
    drift: Drift,
    s: &PdState,
    eps: f64,
    rng: &mut R,
) -> Result<(Option<PdState>, TransitionStats)> {
    let z = standard_normal_vector(s.x.len(), rng);
    let noise = s.chol.transpose().solve_upper_triangular(&z).ok_or_else(not_pd)?;
    let x = &s.x - &s.drift * (0.5 * eps * eps) + noise * eps;
    let next = match build_state(target, field, drift, x) {
        Ok(n) => n,
        Err(Error::Domain { .. } | Error::Numerical(_)) => {
            return Ok((None, TransitionStats::rejected(RejectReason::Divergent, 0, 1)));
        }
        Err(e) => return Err(e),
    };
    let log_ratio = s.potential - next.potential + log_proposal(&s.x, &next, eps) - log_proposal(&next.x, s, eps);
    let stats = TransitionStats::metropolis(log_ratio, next.potential - s.potential, 0, 1, rng);
    Ok((stats.accepted.then_some(next), stats))
}

/// Position-dependent MALA with proposal covariance `ε² M(θ)⁻¹`.
pub struct PdMala<T, G> {
    pub target: T,
    pub field: G,
    pub variant: PdMalaVariant,
}

impl<T: Target, G: MetricField> PdMala<T, G> {
    pub fn new(target: T, field: G, variant: PdMalaVariant) -> Self {
        Self { target, field, variant }
    }
}

impl<T: Target, G: MetricField> Sampler for PdMala<T, G> {
    type State = PdState;

    fn init(&self, theta: &[f64]) -> Result<PdState> {
        build_state(&self.target, &self.field, Drift::Mala(self.variant), DVector::from_column_slice(theta))
    }

    fn transition<R: Rng + ?Sized>(&self, s: &PdState, eps: f64, rng: &mut R) -> Result<(Option<PdState>, TransitionStats)> {
        pd_transition(&self.target, &self.field, Drift::Mala(self.variant), s, eps, rng)
    }

    fn theta(&self, s: &PdState) -> Vec<f64> {
        s.x.as_slice().to_vec()
    }
}

/// Position-dependent random walk, `θ' ~ Normal(θ, ε² M(θ)⁻¹)`.
pub struct PdRwm<T, G> {
    pub target: T,
    pub field: G,
}

impl<T: Target, G: MetricField> PdRwm<T, G> {
    pub fn new(target: T, field: G) -> Self {
        Self { target, field }
    }
}

impl<T: Target, G: MetricField> Sampler for PdRwm<T, G> {
    type State = PdState;

    fn init(&self, theta: &[f64]) -> Result<PdState> {
        build_state(&self.target, &self.field, Drift::None, DVector::from_column_slice(theta))
    }

    fn transition<R: Rng + ?Sized>(&self, s: &PdState, eps: f64, rng: &mut R) -> Result<(Option<PdState>, TransitionStats)> {
        pd_transition(&self.target, &self.field, Drift::None, s, eps, rng)
    }

    fn theta(&self, s: &PdState) -> Vec<f64> {
        s.x.as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::{Mala, PosteriorTarget, Rwm, StandardNormalTarget};
    use crate::zoo::ToyLoopModel;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn identity_metric_reduces_to_plain_kernels() {
        let t = PosteriorTarget(ToyLoopModel::new(0.5));
        let start = [0.4, 0.9];
        for variant in [PdMalaVariant::Simple, PdMalaVariant::Corrected] {
            let pd = PdMala::new(&t, FnMetric::identity(2), variant);
            let plain = Mala::new(&t);
            let (mut r1, mut r2) = (rng(), rng());
            let (mut a, mut b) = (pd.init(&start).unwrap(), plain.init(&start).unwrap());
            for _ in 0..50 {
                let (na, sa) = pd.transition(&a, 0.3, &mut r1).unwrap();
                let (nb, sb) = plain.transition(&b, 0.3, &mut r2).unwrap();
                assert_relative_eq!(sa.accept_prob, sb.accept_prob, epsilon = 1e-12);
                if let Some(n) = na {
                    a = n;
                }
                if let Some(n) = nb {
                    b = n;
                }
                assert!((&a.x - &b.x).amax() < 1e-12);
            }
        }
        let pd = PdRwm::new(&t, FnMetric::identity(2));
        let plain = Rwm::new(&t);
        let (mut r1, mut r2) = (rng(), rng());
        let (a, b) = (pd.init(&start).unwrap(), plain.init(&start).unwrap());
        for _ in 0..20 {
            let (_, sa) = pd.transition(&a, 0.3, &mut r1).unwrap();
            let (_, sb) = plain.transition(&b, 0.3, &mut r2).unwrap();
            assert_relative_eq!(sa.accept_prob, sb.accept_prob, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_step_random_walk_is_identity() {
        let k = PdRwm::new(StandardNormalTarget(2), FnMetric::identity(2));
        let s = k.init(&[1.0, 2.0]).unwrap();
        let (next, st) = k.transition(&s, 0.0, &mut rng()).unwrap();
        assert_eq!(st.accept_prob, 1.0);
        assert_eq!(next.unwrap().x, s.x);
    }

    #[test]
    fn fisher_metric_on_toy_model() {
        let f = FisherMetric(ToyLoopModel::new(0.1));
        let m = f.metric(&[1.0, 1.0]).unwrap();
        let expect = DMatrix::identity(2, 2) + DMatrix::from_row_slice(2, 2, &[9.0, 6.0, 6.0, 4.0]) * 100.0;
        assert_relative_eq!(m, expect, max_relative = 1e-12);
        let (m2, dm) = f.metric_and_derivatives(&[0.3, -0.8]).unwrap();
        assert_relative_eq!(m2, f.metric(&[0.3, -0.8]).unwrap(), max_relative = 1e-12);
        // Central differences of the metric.
        for k in 0..2 {
            let h = 1e-6;
            let mut a = [0.3, -0.8];
            let mut b = a;
            a[k] += h;
            b[k] -= h;
            let fd = (f.metric(&a).unwrap() - f.metric(&b).unwrap()) / (2.0 * h);
            assert!((&dm[k] - fd).amax() / dm[k].amax() < 1e-6);
        }
    }
}
