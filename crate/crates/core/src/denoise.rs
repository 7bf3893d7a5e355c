//! Denoisers for smoothing samples `x + δ`.
//!
//! Every estimator is built on the exact posterior mean `E[x | x_t]` of a
//! [`MixtureModel`] under diffusion noising `x_t = √ᾱ·x + √(1-ᾱ)·ε`. The
//! one-shot denoiser evaluates it once at the matched timestep; the
//! ancestral and deterministic samplers use it as the x₀-estimate inside a
//! multi-step reverse process.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mixture::MixtureModel;
use crate::schedule::{NoiseSchedule, TimestepSolution};

/// Default step count of the deterministic sampler.
pub const DEFAULT_DETERMINISTIC_STEPS: usize = 18;
/// Ratio between the largest and smallest nonzero σ of the deterministic ladder.
const LADDER_SPAN: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    OneShotPosteriorMean,
    AncestralMultiStep,
    DeterministicMultiStep,
    Identity,
    MismatchedPosteriorMean,
}

impl DenoiserKind {
    pub fn name(self) -> &'static str {
        match self {
            DenoiserKind::OneShotPosteriorMean => "one_shot_posterior_mean",
            DenoiserKind::AncestralMultiStep => "ancestral_multi_step",
            DenoiserKind::DeterministicMultiStep => "deterministic_multi_step",
            DenoiserKind::Identity => "identity",
            DenoiserKind::MismatchedPosteriorMean => "mismatched_posterior_mean",
        }
    }
}

/// A denoising strategy together with the data it needs.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    Identity,
    OneShot {
        model: MixtureModel,
    },
    /// Posterior mean calibrated for `sigma_train` (in the `[-1, 1]`
    /// convention) no matter how much noise was actually injected.
    Mismatched {
        model: MixtureModel,
        sigma_train: f64,
    },
    Ancestral {
        model: MixtureModel,
    },
    Deterministic {
        model: MixtureModel,
        steps: usize,
    },
}

impl DenoiserSpec {
    pub fn kind(&self) -> DenoiserKind {
        match self {
            DenoiserSpec::Identity => DenoiserKind::Identity,
            DenoiserSpec::OneShot { .. } => DenoiserKind::OneShotPosteriorMean,
            DenoiserSpec::Mismatched { .. } => DenoiserKind::MismatchedPosteriorMean,
            DenoiserSpec::Ancestral { .. } => DenoiserKind::AncestralMultiStep,
            DenoiserSpec::Deterministic { .. } => DenoiserKind::DeterministicMultiStep,
        }
    }

    pub fn model(&self) -> Option<&MixtureModel> {
        match self {
            DenoiserSpec::Identity => None,
            DenoiserSpec::OneShot { model }
            | DenoiserSpec::Mismatched { model, .. }
            | DenoiserSpec::Ancestral { model }
            | DenoiserSpec::Deterministic { model, .. } => Some(model),
        }
    }

    /// Whether the output is a function of the input alone.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, DenoiserSpec::Ancestral { .. })
    }

    /// Short human-readable label, e.g. for table rows.
    pub fn label(&self) -> String {
        match self {
            DenoiserSpec::Mismatched { sigma_train, .. } => {
                format!("{}@{}", self.kind().name(), sigma_train)
            }
            DenoiserSpec::Deterministic { steps, .. } => {
                format!("{}@{}", self.kind().name(), steps)
            }
            _ => self.kind().name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DenoiserSpec::Mismatched { sigma_train, .. } if !(*sigma_train > 0.0) => Err(
                Error::config(format!("sigma_train must be positive, got {sigma_train}")),
            ),
            DenoiserSpec::Deterministic { steps: 0, .. } => Err(Error::config(
                "deterministic sampler needs at least one step",
            )),
            _ => Ok(()),
        }
    }

    /// Precompute everything that depends only on the noise level.
    pub fn prepare(
        &self,
        solution: &TimestepSolution,
        schedule: &NoiseSchedule,
    ) -> Result<PreparedDenoiser> {
        self.validate()?;
        if let Some(model) = self.model() {
            if model.dim() == 0 {
                return Err(Error::config("empty model"));
            }
        }
        let mut scale = solution.scale_factor();
        let plan = if solution.is_noise_free() {
            Plan::Identity
        } else {
            match self {
                DenoiserSpec::Identity => Plan::Identity,
                DenoiserSpec::OneShot { model } => Plan::OneShot {
                    model: model.clone(),
                    alpha_bar: solution.alpha_bar,
                },
                DenoiserSpec::Mismatched { model, sigma_train } => {
                    // Treats its input as carrying `sigma_train` noise,
                    // whatever was injected.
                    let train = schedule.get_timestep(*sigma_train)?;
                    scale = train.scale_factor();
                    Plan::OneShot {
                        model: model.clone(),
                        alpha_bar: train.alpha_bar,
                    }
                }
                DenoiserSpec::Ancestral { model } => {
                    let alpha_bars = (0..=solution.t_discrete)
                        .map(|t| schedule.alpha_bar(t as f64))
                        .collect::<Result<Vec<_>>>()?;
                    Plan::Ancestral {
                        model: model.clone(),
                        alpha_bars,
                    }
                }
                DenoiserSpec::Deterministic { model, steps } => Plan::Deterministic {
                    model: model.clone(),
                    ladder: sigma_ladder(solution.sigma_achieved, *steps),
                    first_alpha_bar: solution.alpha_bar,
                },
            }
        };
        Ok(PreparedDenoiser { plan, scale })
    }
}

/// Geometric σ ladder from `sigma_max` to `sigma_max / 100` over `steps`
/// values, followed by a final 0.
pub fn sigma_ladder(sigma_max: f64, steps: usize) -> Vec<f64> {
    let mut ladder: Vec<f64> = if steps <= 1 {
        vec![sigma_max]
    } else {
        (0..steps)
            .map(|i| sigma_max * LADDER_SPAN.powf(-(i as f64) / (steps - 1) as f64))
            .collect()
    };
    ladder.push(0.0);
    ladder
}

#[derive(Debug, Clone)]
enum Plan {
    Identity,
    OneShot {
        model: MixtureModel,
        alpha_bar: f64,
    },
    Ancestral {
        model: MixtureModel,
        /// ᾱ(t) for t = 0..=t*.
        alpha_bars: Vec<f64>,
    },
    Deterministic {
        model: MixtureModel,
        ladder: Vec<f64>,
        first_alpha_bar: f64,
    },
}

/// A denoiser bound to one noise level.
#[derive(Debug, Clone)]
pub struct PreparedDenoiser {
    plan: Plan,
    /// `√ᾱ` applied to `x + δ` before denoising.
    scale: f64,
}

impl PreparedDenoiser {
    pub fn is_deterministic(&self) -> bool {
        !matches!(self.plan, Plan::Ancestral { .. })
    }

    /// Denoise a smoothing sample `x + δ` into `out`; the result lies in
    /// `[-1, 1]^d`. `rng` is only consumed by the ancestral sampler.
    pub fn denoise_into<R: Rng + ?Sized>(&self, x_noised: &[f64], out: &mut [f64], rng: &mut R) {
        debug_assert_eq!(x_noised.len(), out.len());
        match &self.plan {
            Plan::Identity => out.copy_from_slice(x_noised),
            Plan::OneShot { model, alpha_bar } => {
                posterior_mean_scaled(model, x_noised, self.scale, *alpha_bar, out);
            }
            Plan::Ancestral { model, alpha_bars } => {
                ancestral_chain(model, alpha_bars, x_noised, self.scale, out, rng);
            }
            Plan::Deterministic {
                model,
                ladder,
                first_alpha_bar,
            } => deterministic_chain(model, ladder, *first_alpha_bar, x_noised, out),
        }
        clamp_cube(out);
    }

    pub fn denoise<R: Rng + ?Sized>(&self, x_noised: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; x_noised.len()];
        self.denoise_into(x_noised, &mut out, rng);
        out
    }
}

pub(crate) fn clamp_cube(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Unclamped `E[x | x_t]` at signal level `alpha_bar`, written into `out`.
///
/// The marginal of `x_t` is `Σ w_k N(√ᾱ μ_k, (ᾱτ² + 1 − ᾱ)I)`; within each
/// component the conditional mean is `μ_k + (√ᾱ τ² / v)(x_t − √ᾱ μ_k)`.
pub fn posterior_mean_into(model: &MixtureModel, x_t: &[f64], alpha_bar: f64, out: &mut [f64]) {
    posterior_mean_scaled(model, x_t, 1.0, alpha_bar, out);
}

/// Posterior mean at `x_t = input_scale · x`, without materializing `x_t`.
pub(crate) fn posterior_mean_scaled(
    model: &MixtureModel,
    x: &[f64],
    input_scale: f64,
    alpha_bar: f64,
    out: &mut [f64],
) {
    if alpha_bar >= 1.0 {
        for (o, v) in out.iter_mut().zip(x) {
            *o = input_scale * v;
        }
        return;
    }
    let tau2 = model.tau() * model.tau();
    let scale = alpha_bar.sqrt();
    let var = alpha_bar * tau2 + (1.0 - alpha_bar);
    let gain = scale * tau2 / var;
    let inv = 0.5 / var;
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut max = f64::NEG_INFINITY;
    let mut total = 0.0;
    for (mean, log_w) in model.means().iter().zip(model.log_weights()) {
        let d2: f64 = x
            .iter()
            .zip(mean)
            .map(|(x, m)| {
                let r = input_scale * x - scale * m;
                r * r
            })
            .sum();
        let lr = log_w - d2 * inv;
        if lr == f64::NEG_INFINITY {
            continue;
        }
        let w = if lr > max {
            let rescale = (max - lr).exp();
            total *= rescale;
            out.iter_mut().for_each(|v| *v *= rescale);
            max = lr;
            1.0
        } else {
            (lr - max).exp()
        };
        total += w;
        for ((o, x), m) in out.iter_mut().zip(x).zip(mean) {
            *o += w * (m + gain * (input_scale * x - scale * m));
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
}

/// Unclamped posterior mean, checking dimensions.
pub fn posterior_mean_raw(model: &MixtureModel, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_dim(model.dim(), x_t.len())?;
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::domain(format!(
            "alpha_bar must lie in (0, 1], got {alpha_bar}"
        )));
    }
    let mut out = vec![0.0; x_t.len()];
    posterior_mean_into(model, x_t, alpha_bar, &mut out);
    Ok(out)
}

/// `E[x | x_t]` at the solution's timestep, clamped to the input cube.
pub fn posterior_mean(
    model: &MixtureModel,
    x_t: &[f64],
    solution: &TimestepSolution,
) -> Result<Vec<f64>> {
    let mut out = posterior_mean_raw(model, x_t, solution.alpha_bar)?;
    clamp_cube(&mut out);
    Ok(out)
}

fn check_input(spec: &DenoiserSpec, x_noised: &[f64]) -> Result<()> {
    if let Some(model) = spec.model() {
        check_dim(model.dim(), x_noised.len())?;
    }
    Ok(())
}

/// Single application of the spec's estimator at the timestep matched to
/// `sigma`. Multi-step specs use their model's one-shot posterior mean.
pub fn one_shot_denoise(
    spec: &DenoiserSpec,
    x_noised: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_input(spec, x_noised)?;
    let solution = schedule.get_timestep(sigma)?;
    let single = match spec {
        DenoiserSpec::Ancestral { model } | DenoiserSpec::Deterministic { model, .. } => {
            DenoiserSpec::OneShot {
                model: model.clone(),
            }
        }
        other => other.clone(),
    };
    let prepared = single.prepare(&solution, schedule)?;
    let mut out = vec![0.0; x_noised.len()];
    prepared.denoise_into(x_noised, &mut out, &mut unused_rng());
    Ok(out)
}

/// Placeholder stream for estimators that never draw.
fn unused_rng() -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

fn require_model<'a>(spec: &'a DenoiserSpec, what: &str) -> Result<&'a MixtureModel> {
    spec.model()
        .ok_or_else(|| Error::Unsupported(format!("{what} needs a mixture-backed denoiser")))
}

/// Ancestral reverse chain from the matched timestep down to 0. Each step
/// re-noises with the schedule's posterior variance.
pub fn ancestral_denoise<R: Rng + ?Sized>(
    spec: &DenoiserSpec,
    x_noised: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_input(spec, x_noised)?;
    let solution = schedule.get_timestep(sigma)?;
    ancestral_denoise_at(spec, x_noised, &solution, schedule, rng)
}

/// [`ancestral_denoise`] at an explicit solution, e.g. `t* = 0`.
pub fn ancestral_denoise_at<R: Rng + ?Sized>(
    spec: &DenoiserSpec,
    x_noised: &[f64],
    solution: &TimestepSolution,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_input(spec, x_noised)?;
    let model = require_model(spec, "ancestral sampling")?;
    let prepared = DenoiserSpec::Ancestral {
        model: model.clone(),
    }
    .prepare(solution, schedule)?;
    Ok(prepared.denoise(x_noised, rng))
}

/// Deterministic Euler trajectory along a geometric σ ladder that starts at
/// the matched noise level. Uses `spec.steps` for a deterministic spec and
/// the default of 18 otherwise.
pub fn deterministic_denoise(
    spec: &DenoiserSpec,
    x_noised: &[f64],
    sigma: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_input(spec, x_noised)?;
    let model = require_model(spec, "deterministic sampling")?;
    let steps = match spec {
        DenoiserSpec::Deterministic { steps, .. } => *steps,
        _ => DEFAULT_DETERMINISTIC_STEPS,
    };
    let solution = schedule.get_timestep(sigma)?;
    let prepared = DenoiserSpec::Deterministic {
        model: model.clone(),
        steps,
    }
    .prepare(&solution, schedule)?;
    Ok(prepared.denoise(x_noised, &mut unused_rng()))
}

fn ancestral_chain<R: Rng + ?Sized>(
    model: &MixtureModel,
    alpha_bars: &[f64],
    x_noised: &[f64],
    scale: f64,
    out: &mut [f64],
    rng: &mut R,
) {
    let mut x_t: Vec<f64> = x_noised.iter().map(|v| v * scale).collect();
    let mut x0 = vec![0.0; x_t.len()];
    for t in (1..alpha_bars.len()).rev() {
        let a_t = alpha_bars[t];
        let a_prev = alpha_bars[t - 1];
        posterior_mean_into(model, &x_t, a_t, &mut x0);
        clamp_cube(&mut x0);
        let beta = 1.0 - a_t / a_prev;
        let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
        let std = (beta * (1.0 - a_prev) / (1.0 - a_t)).sqrt();
        for (xt, x0) in x_t.iter_mut().zip(&x0) {
            let mut next = c0 * x0 + ct * *xt;
            if t > 1 {
                let z: f64 = StandardNormal.sample(rng);
                next += std * z;
            }
            *xt = next;
        }
    }
    out.copy_from_slice(&x_t);
}

fn deterministic_chain(
    model: &MixtureModel,
    ladder: &[f64],
    first_alpha_bar: f64,
    x_noised: &[f64],
    out: &mut [f64],
) {
    let mut x = x_noised.to_vec();
    let mut denoised = vec![0.0; x.len()];
    for (i, pair) in ladder.windows(2).enumerate() {
        let (sigma, next) = (pair[0], pair[1]);
        let alpha_bar = if i == 0 {
            first_alpha_bar
        } else {
            1.0 / (1.0 + sigma * sigma)
        };
        posterior_mean_scaled(model, &x, alpha_bar.sqrt(), alpha_bar, &mut denoised);
        let h = (next - sigma) / sigma;
        for (v, d) in x.iter_mut().zip(&denoised) {
            *v += h * (*v - d);
        }
    }
    out.copy_from_slice(&x);
}
