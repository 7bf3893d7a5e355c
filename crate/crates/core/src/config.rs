//! Run configuration, read from TOML or JSON.
//!
//! Noise levels in a configuration file use the `[0, 1]` input convention;
//! they are doubled before reaching the engine, which works in `[-1, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierKind, LabeledMixture, MixtureClassifier};
use crate::denoise::{DenoiserKind, DenoiserSpec, DEFAULT_DETERMINISTIC_STEPS};
use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::oracle::{QuadratureGrid, QuadratureScheme, SearchBudget};
use crate::pipeline::{sample_dataset, Point};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::stats::CertifyParams;

/// Factor from the `[0, 1]` convention to the engine's `[-1, 1]` convention.
pub const SIGMA_SCALE: f64 = 2.0;

pub fn to_internal(sigma: f64) -> f64 {
    sigma * SIGMA_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_steps() -> usize {
    1000
}
fn default_offset() -> f64 {
    0.008
}
fn default_beta_min() -> f64 {
    1e-4
}
fn default_beta_max() -> f64 {
    0.02
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: default_steps(),
            offset: default_offset(),
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps, self.offset),
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub tau: f64,
    /// Class of each component.
    pub labels: Vec<usize>,
    /// Number of classes; defaults to one more than the largest label.
    #[serde(default)]
    pub classes: Option<usize>,
}

impl MixtureConfig {
    pub fn build(&self) -> Result<LabeledMixture> {
        let model = MixtureModel::new(self.weights.clone(), self.means.clone(), self.tau)?;
        let classes = self
            .classes
            .unwrap_or_else(|| self.labels.iter().max().map_or(0, |m| m + 1));
        LabeledMixture::new(model, self.labels.clone(), classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    /// Defaults to the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A denoiser by kind; its mixture model is the run's mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// Calibration noise of a mismatched denoiser, `[0, 1]` convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_train: Option<f64>,
    /// Steps of the deterministic sampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl DenoiserConfig {
    pub fn of(kind: DenoiserKind) -> Self {
        Self {
            kind,
            sigma_train: None,
            steps: None,
        }
    }

    pub fn build(&self, model: &MixtureModel) -> Result<DenoiserSpec> {
        let model = model.clone();
        let spec = match self.kind {
            DenoiserKind::Identity => DenoiserSpec::Identity,
            DenoiserKind::OneShotPosteriorMean => DenoiserSpec::OneShot { model },
            DenoiserKind::AncestralMultiStep => DenoiserSpec::Ancestral { model },
            DenoiserKind::DeterministicMultiStep => DenoiserSpec::Deterministic {
                model,
                steps: self.steps.unwrap_or(DEFAULT_DETERMINISTIC_STEPS),
            },
            DenoiserKind::MismatchedPosteriorMean => {
                let train = self
                    .sigma_train
                    .ok_or_else(|| Error::config("mismatched_posterior_mean needs sigma_train"))?;
                DenoiserSpec::Mismatched {
                    model,
                    sigma_train: to_internal(train),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::of(DenoiserKind::OneShotPosteriorMean)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default)]
    pub kind: ClassifierKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_n")]
    pub n: u64,
    #[serde(default = "default_alpha")]
    pub alpha_fail: f64,
    #[serde(default = "default_alpha")]
    pub eta: f64,
}

fn default_n0() -> u64 {
    100
}
fn default_n() -> u64 {
    100_000
}
fn default_alpha() -> f64 {
    0.001
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            n0: default_n0(),
            n: default_n(),
            alpha_fail: default_alpha(),
            eta: default_alpha(),
        }
    }
}

impl CertifyConfig {
    /// Parameters at a configured (`[0, 1]` convention) noise level.
    pub fn params(&self, sigma: f64) -> CertifyParams {
        CertifyParams {
            sigma: to_internal(sigma),
            n0: self.n0,
            n: self.n,
            alpha_fail: self.alpha_fail,
            eta: self.eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Defaults to the run's σ grid.
    #[serde(default)]
    pub sigmas: Option<Vec<f64>>,
    pub denoisers: Vec<DenoiserConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub sigma_train: Vec<f64>,
    /// Defaults to `sigma_train`.
    #[serde(default)]
    pub sigma_eval: Option<Vec<f64>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Noise level, `[0, 1]` convention; defaults to the first of the grid.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Points checked at their certified radius; defaults to the dataset size.
    #[serde(default)]
    pub points: Option<usize>,
    #[serde(default = "default_scheme")]
    pub scheme: QuadratureScheme,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_ascent")]
    pub ascent_steps: usize,
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Near-boundary points checked at an inflated radius.
    #[serde(default = "default_boundary_points")]
    pub boundary_points: usize,
    /// Smoothed probability of the constructed near-boundary points.
    #[serde(default = "default_boundary_p")]
    pub boundary_p: f64,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
}

fn default_scheme() -> QuadratureScheme {
    QuadratureScheme::TensorGrid
}
fn default_nodes() -> usize {
    64
}
fn default_directions() -> usize {
    SearchBudget::default().directions
}
fn default_ascent() -> usize {
    SearchBudget::default().ascent_steps
}
fn default_step_fraction() -> f64 {
    SearchBudget::default().step_fraction
}
fn default_tolerance() -> f64 {
    SearchBudget::default().tolerance
}
fn default_boundary_points() -> usize {
    10
}
fn default_boundary_p() -> f64 {
    0.6
}
fn default_inflation() -> f64 {
    1.5
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            points: None,
            scheme: default_scheme(),
            nodes: default_nodes(),
            directions: default_directions(),
            ascent_steps: default_ascent(),
            step_fraction: default_step_fraction(),
            tolerance: default_tolerance(),
            boundary_points: default_boundary_points(),
            boundary_p: default_boundary_p(),
            inflation: default_inflation(),
        }
    }
}

impl VerifyConfig {
    pub fn grid(&self, dim: usize) -> Result<QuadratureGrid> {
        QuadratureGrid::new(self.scheme, self.nodes, dim)
    }

    pub fn budget(&self) -> SearchBudget {
        SearchBudget {
            directions: self.directions,
            ascent_steps: self.ascent_steps,
            step_fraction: self.step_fraction,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Smoothing noise levels, `[0, 1]` convention.
    pub sigmas: Vec<f64>,
    /// Radii at which certified accuracy is tabulated, `[0, 1]` convention.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Spacing of the ε grid of certified-accuracy curves.
    #[serde(default = "default_curve_step")]
    pub curve_step: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub mixture: MixtureConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_workers() -> usize {
    1
}
fn default_epsilons() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn default_curve_step() -> f64 {
    0.01
}

impl RunConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        if self.sigmas.is_empty() {
            return Err(Error::config("at least one sigma is required"));
        }
        check_levels("sigmas", &self.sigmas)?;
        if self.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::config("epsilons must be finite and nonnegative"));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "epsilons must be sorted ascending without repeats",
            ));
        }
        if !(self.curve_step > 0.0 && self.curve_step.is_finite()) {
            return Err(Error::config("curve_step must be positive"));
        }
        let mixture = self.mixture.build()?;
        self.denoiser.build(mixture.model())?;
        for sigma in &self.sigmas {
            self.certify.params(*sigma).validate()?;
        }
        if let Some(compare) = &self.compare {
            if compare.denoisers.is_empty() || compare.seeds.is_empty() {
                return Err(Error::config("compare needs denoisers and seeds"));
            }
            if let Some(s) = &compare.sigmas {
                check_levels("compare.sigmas", s)?;
            }
            for d in &compare.denoisers {
                d.build(mixture.model())?;
            }
        }
        if let Some(ablate) = &self.ablate {
            check_levels("ablate.sigma_train", &ablate.sigma_train)?;
            if let Some(e) = &ablate.sigma_eval {
                check_levels("ablate.sigma_eval", e)?;
            }
            if ablate.sigma_train.iter().any(|s| *s <= 0.0) {
                return Err(Error::config("ablate.sigma_train must be positive"));
            }
            if ablate.seeds.is_empty() {
                return Err(Error::config("ablate needs seeds"));
            }
        }
        let v = &self.verify;
        if !(v.inflation > 1.0) || !(v.boundary_p > 0.5 && v.boundary_p < 1.0) {
            return Err(Error::config(
                "verify.inflation must exceed 1 and verify.boundary_p lie in (0.5, 1)",
            ));
        }
        if !(v.step_fraction > 0.0 && v.tolerance >= 0.0) {
            return Err(Error::config("verify search budget is invalid"));
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn mixture(&self) -> Result<LabeledMixture> {
        self.mixture.build()
    }

    pub fn classifier(&self) -> Result<MixtureClassifier> {
        Ok(MixtureClassifier::new(
            self.classifier.kind,
            self.mixture()?,
        ))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn denoiser(&self) -> Result<DenoiserSpec> {
        self.denoiser.build(self.mixture()?.model())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// The labeled evaluation points drawn from the mixture.
    pub fn dataset(&self) -> Result<Vec<Point>> {
        if self.dataset.size == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(sample_dataset(
            &self.mixture()?,
            self.dataset.size,
            self.dataset_seed(),
        ))
    }
}

fn check_levels(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(format!("{name} must not be empty")));
    }
    if values.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::config(format!(
            "{name} must be finite and nonnegative"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
sigmas = [0.25, 0.5]

[mixture]
weights = [0.5, 0.5]
means = [[-0.5], [0.5]]
tau = 0.2
labels = [0, 1]

[dataset]
size = 10
"#;

    #[test]
    fn minimal_toml_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.workers, 1);
        assert_eq!(c.certify.n, 100_000);
        assert_eq!(c.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(c.denoiser.kind, DenoiserKind::OneShotPosteriorMean);
        assert_eq!(c.certify.params(0.25).sigma, 0.5);
        assert_eq!(c.dataset().unwrap().len(), 10);
    }

    #[test]
    fn json_encodes_the_same_schema() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse(&json).unwrap(), c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let unsorted = MINIMAL.replace(
            "sigmas = [0.25, 0.5]",
            "sigmas = [0.25]\nepsilons = [0.5, 0.25]",
        );
        assert!(matches!(RunConfig::parse(&unsorted), Err(Error::Config(_))));
        let unknown = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(matches!(RunConfig::parse(&unknown), Err(Error::Config(_))));
        let bad_json = "{\"seed\": }";
        assert!(matches!(RunConfig::parse(bad_json), Err(Error::Json(_))));
        let mismatched = MINIMAL.replace(
            "[dataset]",
            "[denoiser]\nkind = \"mismatched_posterior_mean\"\n\n[dataset]",
        );
        assert!(matches!(
            RunConfig::parse(&mismatched),
            Err(Error::Config(_))
        ));
        let empty = MINIMAL.replace("size = 10", "size = 0");
        assert!(matches!(
            RunConfig::parse(&empty).unwrap().dataset(),
            Err(Error::EmptyDataset)
        ));
    }
}
