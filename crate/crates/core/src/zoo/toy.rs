use crate::model::{Model, Scalar};

/// Two-parameter model with a quartic loop as limiting manifold:
/// `F(θ) = θ₁² + θ₀²(θ₀² − ½)`, observed `y = 1`, standard normal prior.
#[derive(Clone, Debug)]
pub struct ToyLoopModel {
    sigma: f64,
    y: [f64; 1],
}

impl ToyLoopModel {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0, "noise scale must be positive");
        Self { sigma, y: [1.0] }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_observation(mut self, y: f64) -> Self {
        self.y = [y];
        self
    }
}

impl Model for ToyLoopModel {
    fn dim_theta(&self) -> usize {
        2
    }

    fn dim_y(&self) -> usize {
        1
    }

    fn observed(&self) -> &[f64] {
        &self.y
    }

    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        let a2 = theta[0].square();
        vec![theta[1].square() + a2.clone() * (a2 - 0.5)]
    }

    fn noise_scale<S: Scalar>(&self, _theta: &[S]) -> S {
        S::constant(self.sigma)
    }

    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        (theta[0].square() + theta[1].square()) * 0.5
    }

    fn constant_noise(&self) -> bool {
        true
    }
}

/// Point on the limiting loop `{F(θ) = y}` at polar angle `angle`.
///
/// Along a ray the level-set equation is a quadratic in `r²` with a unique
/// positive root.
pub fn loop_point(angle: f64, y: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    let a = c.powi(4);
    let b = s * s - 0.5 * c * c;
    // Stable root of a r⁴ + b r² − y = 0 for either sign of b.
    let disc = (b * b + 4.0 * a * y).sqrt();
    let r2 = if b >= 0.0 { 2.0 * y / (b + disc) } else { (disc - b) / (2.0 * a) };
    let r = r2.sqrt();
    [r * c, r * s]
}

/// `n` points equispaced in arc length around the limiting loop, starting at
/// angle zero. Arc length is accumulated on a fine polar grid.
pub fn equispaced_loop_points(n: usize, y: f64) -> Vec<[f64; 2]> {
    const GRID: usize = 20_000;
    let angle = |k: f64| std::f64::consts::TAU * k / GRID as f64;
    let pts: Vec<[f64; 2]> = (0..=GRID).map(|k| loop_point(angle(k as f64), y)).collect();
    let mut cum = vec![0.0; GRID + 1];
    for k in 1..=GRID {
        let d = ((pts[k][0] - pts[k - 1][0]).powi(2) + (pts[k][1] - pts[k - 1][1]).powi(2)).sqrt();
        cum[k] = cum[k - 1] + d;
    }
    let total = cum[GRID];
    (0..n)
        .map(|i| {
            let target = total * i as f64 / n as f64;
            let k = cum.partition_point(|&c| c < target).min(GRID);
            if k == 0 {
                return pts[0];
            }
            // Interpolate the angle so the point stays on the loop.
            let w = (target - cum[k - 1]) / (cum[k] - cum[k - 1]);
            loop_point(angle(k as f64 - 1.0 + w), y)
        })
        .collect()
}
