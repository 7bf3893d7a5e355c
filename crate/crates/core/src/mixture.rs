//! Isotropic Gaussian mixtures: the synthetic data distribution behind the
//! analytic denoisers and the Bayes classifier.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `Σ_k w_k N(μ_k, τ²I)` with means inside `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct MixtureModel {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    tau: f64,
}

impl TryFrom<RawMixture> for MixtureModel {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        MixtureModel::new(raw.weights, raw.means, raw.tau)
    }
}

impl From<MixtureModel> for RawMixture {
    fn from(m: MixtureModel) -> Self {
        RawMixture {
            weights: m.weights,
            means: m.means,
            tau: m.tau,
        }
    }
}

impl MixtureModel {
    /// Weights must be nonnegative and sum to 1 (within 1e-9; they are then
    /// renormalized exactly).
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        if weights.len() != means.len() {
            return Err(Error::config(format!(
                "{} weights but {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(
                "mixture weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        for mean in &means {
            check_dim(dim, mean.len())?;
            if mean.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::config("mixture means must lie in [-1, 1]^d"));
            }
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {tau}")));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            means,
            tau,
        })
    }

    /// Random mixture: means uniform in `[-0.8, 0.8]^d`, weights from a flat
    /// Dirichlet.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        components: usize,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::config(
                "random mixture needs positive dimension and component count",
            ));
        }
        let means = (0..components)
            .map(|_| (0..dim).map(|_| rng.random_range(-0.8..=0.8)).collect())
            .collect();
        // Flat Dirichlet via normalized exponentials.
        let raw: Vec<f64> = (0..components)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        Self::new(raw.iter().map(|r| r / total).collect(), means, tau)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Weights multiplied by `factor` without renormalizing.
    #[cfg(test)]
    pub(crate) fn with_scaled_weights(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.log_weights = self.weights.iter().map(|w| (w * factor).ln()).collect();
        out
    }

    /// Draw a component index and a point clamped to the input cube.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let x = self.means[k]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                (m + self.tau * z).clamp(-1.0, 1.0)
            })
            .collect();
        (k, x)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validation() {
        assert!(MixtureModel::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]], 0.1).is_ok());
        assert!(MixtureModel::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], 0.1).is_err());
        assert!(MixtureModel::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.5]], 0.1).is_err());
        assert!(MixtureModel::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 0.0]], 0.1).is_err());
        assert!(MixtureModel::new(vec![1.0], vec![vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn serde_round_trip_validates() {
        let m = MixtureModel::new(vec![0.25, 0.75], vec![vec![-0.5, 0.5], vec![0.5, 0.5]], 0.2)
            .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: MixtureModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"weights":[1.0],"means":[[2.0]],"tau":0.1}"#;
        assert!(serde_json::from_str::<MixtureModel>(bad).is_err());
    }

    #[test]
    fn samples_follow_weights_and_stay_in_cube() {
        let m = MixtureModel::new(vec![0.2, 0.8], vec![vec![-0.9], vec![0.9]], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut hits = 0;
        for _ in 0..n {
            let (k, x) = m.sample(&mut rng);
            assert!(x[0].abs() <= 1.0);
            hits += (k == 1) as usize;
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.015, "{frac}");
    }

    #[test]
    fn random_mixture_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MixtureModel::random(3, 5, 0.1, &mut rng).unwrap();
        assert_eq!((m.dim(), m.components()), (3, 5));
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
