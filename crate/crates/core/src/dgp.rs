//! Simulation designs: linear IV with locally drifting moment means and a
//! normal design that misspecifies `mean_square_match`.

use crate::error::Result;
use crate::estimation::{fit, FitStrategy};
use crate::moments::{linear_iv, mean_square_match, Dataset, MomentModel};
use crate::rng::{standard_normal, sub_rng, Rng};

/// `y = beta w + e + z' eta / sqrt(n)`, `w = pi' z + v`, `z ~ N(0, I_k)`,
/// `(e, v)` standard normal with correlation `rho`. The instrument moments
/// `E[z (y - beta w)]` equal `eta / sqrt(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearIvDgp {
    pub beta: f64,
    pub pi: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: f64,
}

impl LinearIvDgp {
    pub fn new(beta: f64, pi: Vec<f64>, eta: Vec<f64>, rho: f64) -> Self {
        assert_eq!(pi.len(), eta.len(), "pi and eta need one entry per instrument");
        assert!(rho.abs() < 1.0, "rho must lie in (-1, 1)");
        Self { beta, pi, eta, rho }
    }

    /// `k` instruments of strength 0.6 and drift `drift * (1, -1, 1, ...)`,
    /// orthogonal to `pi` when `k` is even.
    pub fn standard(k: usize, drift: f64, rho: f64) -> Self {
        let eta = (0..k).map(|j| if j % 2 == 0 { drift } else { -drift }).collect();
        Self::new(1.0, vec![0.6; k], eta, rho)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["y".to_string(), "w".to_string()];
        c.extend((1..=self.k()).map(|j| format!("z{j}")));
        c
    }

    pub fn model(&self) -> MomentModel {
        linear_iv(0, vec![1], (2..2 + self.k()).collect()).expect("valid column layout")
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let k = self.k();
        let scale = 1.0 / (n as f64).sqrt();
        let tail = (1.0 - self.rho * self.rho).sqrt();
        let mut values = Vec::with_capacity(n * (k + 2));
        let mut z = vec![0.0; k];
        for _ in 0..n {
            for zj in z.iter_mut() {
                *zj = standard_normal(rng);
            }
            let v = standard_normal(rng);
            let e = self.rho * v + tail * standard_normal(rng);
            let w = self.pi.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + v;
            let drift = self.eta.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() * scale;
            values.push(self.beta * w + e + drift);
            values.push(w);
            values.extend_from_slice(&z);
        }
        Dataset::from_flat(self.columns(), values).expect("consistent layout")
    }
}

/// Seeded sample from [`LinearIvDgp::standard`] with its moment model.
pub fn linear_iv_local(n: usize, k: usize, drift: f64, rho: f64, seed: u64) -> (MomentModel, Dataset) {
    let dgp = LinearIvDgp::standard(k, drift, rho);
    let mut rng = sub_rng(seed, 0);
    (dgp.model(), dgp.sample(n, &mut rng))
}

/// `x ~ N(mu, sd^2)` in column `x`. For `mean_square_match` the moment means
/// at `psi` are `(mu - psi, mu^2 + sd^2 - psi^2)`, so the model is
/// misspecified unless `sd = 0`.
pub fn normal_mean_square(n: usize, mu: f64, sd: f64, seed: u64) -> Dataset {
    let mut rng = sub_rng(seed, 0);
    normal_column(n, mu, sd, &mut rng)
}

pub fn normal_column(n: usize, mu: f64, sd: f64, rng: &mut Rng) -> Dataset {
    let xs: Vec<f64> = (0..n).map(|_| mu + sd * standard_normal(rng)).collect();
    Dataset::from_column("x", &xs).expect("nonempty column")
}

/// Simulation design for Monte Carlo runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Dgp {
    LinearIv(LinearIvDgp),
    NormalMeanSquare { mu: f64, sd: f64 },
}

impl Dgp {
    pub fn name(&self) -> &'static str {
        match self {
            Dgp::LinearIv(_) => "linear_iv",
            Dgp::NormalMeanSquare { .. } => "mean_square_match",
        }
    }

    pub fn model(&self) -> MomentModel {
        match self {
            Dgp::LinearIv(d) => d.model(),
            Dgp::NormalMeanSquare { .. } => mean_square_match(0),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        match self {
            Dgp::LinearIv(d) => d.sample(n, rng),
            Dgp::NormalMeanSquare { mu, sd } => normal_column(n, *mu, *sd, rng),
        }
    }
}

/// Size of the synthetic population used for pseudo-true values.
pub const POPULATION_SIZE: usize = 1_000_000;

/// Pseudo-true target: the estimate of `strategy` on a large synthetic
/// population, whose weight is the strategy's limiting weight.
pub fn pseudo_true(dgp: &Dgp, population_n: usize, strategy: &FitStrategy, seed: u64) -> Result<f64> {
    let mut rng = sub_rng(seed, u64::MAX);
    let population = dgp.sample(population_n, &mut rng);
    Ok(fit(&dgp.model(), &population, strategy)?.theta_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::OptimizerSettings;
    use crate::moments::sample_moments;
    use crate::weights::WeightMatrix;

    #[test]
    fn iv_moment_means_follow_drift() {
        let dgp = LinearIvDgp::standard(4, 2.0, 0.5);
        let n = 400_000;
        let mut rng = sub_rng(1, 0);
        let data = dgp.sample(n, &mut rng);
        let g = sample_moments(&dgp.model(), &data, &[dgp.beta]).unwrap();
        for j in 0..4 {
            let target = dgp.eta[j] / (n as f64).sqrt();
            // sd of each moment is about 1; allow 5 standard errors
            assert!((g[j] - target).abs() < 5.0 / (n as f64).sqrt(), "{j}: {} vs {target}", g[j]);
        }
    }

    /// Identity-weight pseudo-true value solves `4 psi^3 + (2 - 4 m2) psi - 2 mu = 0`
    /// with `m2 = mu^2 + sd^2` (stationarity of the population criterion).
    fn identity_pseudo_true(mu: f64, sd: f64) -> f64 {
        let m2 = mu * mu + sd * sd;
        let f = |p: f64| 4.0 * p.powi(3) + (2.0 - 4.0 * m2) * p - 2.0 * mu;
        let (mut lo, mut hi) = (mu.max(0.0), m2.sqrt() + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn population_pseudo_true_matches_cubic_root() {
        let dgp = Dgp::NormalMeanSquare { mu: 0.2, sd: 1.0 };
        let s = FitStrategy::fixed(WeightMatrix::identity(2)).with_optimizer(OptimizerSettings::default().with_init(vec![1.0]));
        let est = pseudo_true(&dgp, POPULATION_SIZE, &s, 7).unwrap();
        let exact = identity_pseudo_true(0.2, 1.0);
        assert!((exact - 0.8141).abs() < 1e-3);
        // population sampling error is O(1e-3)
        assert!((est - exact).abs() < 5e-3, "{est} vs {exact}");
    }

    #[test]
    fn samples_are_deterministic() {
        let (_, a) = linear_iv_local(50, 3, 1.0, 0.3, 9);
        let (_, b) = linear_iv_local(50, 3, 1.0, 0.3, 9);
        assert_eq!(a, b);
        assert_eq!(normal_mean_square(20, 0.0, 1.0, 4), normal_mean_square(20, 0.0, 1.0, 4));
    }
}
