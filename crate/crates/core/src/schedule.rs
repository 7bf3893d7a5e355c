//! Diffusion noise schedules and the mapping between a randomized-smoothing
//! noise level σ and a diffusion timestep.
//!
//! A diffusion model noises a clean input as `x_t = √ᾱ(t)·x + √(1-ᾱ(t))·ε`.
//! Scaling a smoothing sample `x + δ`, `δ ~ N(0, σ²I)`, by `√ᾱ(t)` produces
//! exactly that distribution when `σ² = (1 - ᾱ(t)) / ᾱ(t)`, so every σ in the
//! schedule's range has a matching timestep.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bisection stops once `|σ²(t) - σ²|` is below this (scaled by `max(1, σ²)`).
const BISECTION_TOL_SIGMA_SQ: f64 = 1e-10;
const BISECTION_MAX_ITERS: usize = 200;
/// A continuous timestep this close to an integer is treated as that integer.
const INTEGER_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// The ᾱ(t) curve of a diffusion process over `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    offset: f64,
    beta_min: f64,
    beta_max: f64,
    /// `ln ᾱ(n)` for integer `n`, linear schedule only.
    log_alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(1000, 0.008).expect("reference cosine schedule is valid")
    }
}

impl NoiseSchedule {
    /// `ᾱ(t) = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(Error::config(format!(
                "cosine offset must be >= 0, got {offset}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Cosine,
            steps,
            offset,
            beta_min: 0.0,
            beta_max: 0.0,
            log_alpha_bar: Vec::new(),
        })
    }

    /// Cumulative product of `1 - β_i` with β rising linearly from
    /// `beta_min` (i = 1) to `beta_max` (i = T). Between integers `ln ᾱ` is
    /// linearly interpolated.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max < 1.0) {
            return Err(Error::config(format!(
                "linear schedule needs 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut log_alpha_bar = Vec::with_capacity(steps + 1);
        log_alpha_bar.push(0.0);
        let mut acc = 0.0;
        for i in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (i - 1) as f64 / (steps - 1) as f64
            };
            let beta = beta_min + (beta_max - beta_min) * frac;
            acc += (-beta).ln_1p();
            log_alpha_bar.push(acc);
        }
        Ok(Self {
            kind: ScheduleKind::Linear,
            steps,
            offset: 0.0,
            beta_min,
            beta_max,
            log_alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of discrete timesteps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.steps as f64 {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )))
        }
    }

    /// Phase angle of the cosine schedule at `t`.
    fn angle(&self, t: f64) -> f64 {
        (t / self.steps as f64 + self.offset) / (1.0 + self.offset) * FRAC_PI_2
    }

    fn log_alpha_bar_linear(&self, t: f64) -> f64 {
        let lo = t.floor() as usize;
        if lo >= self.steps {
            return self.log_alpha_bar[self.steps];
        }
        let frac = t - lo as f64;
        let (a, b) = (self.log_alpha_bar[lo], self.log_alpha_bar[lo + 1]);
        a + (b - a) * frac
    }

    /// ᾱ(t), continuous and strictly decreasing on `[0, T]`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar_unchecked(t))
    }

    pub(crate) fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let f0 = self.angle(0.0).cos().powi(2);
                self.angle(t).cos().powi(2) / f0
            }
            ScheduleKind::Linear => self.log_alpha_bar_linear(t).exp(),
        }
    }

    /// `(1 - ᾱ(t)) / ᾱ(t)`, evaluated without cancellation near `t = 0`.
    fn sigma_sq(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                // cos²a − cos²b = sin(b + a)·sin(b − a)
                let a = self.angle(0.0);
                let b = self.angle(t);
                (b + a).sin() * (b - a).sin() / b.cos().powi(2)
            }
            ScheduleKind::Linear => (-self.log_alpha_bar_linear(t)).exp_m1(),
        }
    }

    /// Smoothing noise level equivalent to timestep `t`: `√((1 - ᾱ)/ᾱ)`.
    pub fn sigma_of_t(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigma_sq(t).max(0.0).sqrt())
    }

    /// Largest σ the schedule can represent (reached at `t = T`).
    pub fn max_sigma(&self) -> f64 {
        self.sigma_sq(self.steps as f64).sqrt()
    }

    fn check_sigma(&self, sigma: f64) -> Result<()> {
        if !(sigma >= 0.0) {
            return Err(Error::domain(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        let max_sigma = self.max_sigma();
        if sigma > max_sigma {
            return Err(Error::Unsatisfiable { sigma, max_sigma });
        }
        Ok(())
    }

    /// Closed-form inverse of the cosine schedule:
    /// `t* = T(1 − 2(1+s)·csc⁻¹(√(1+σ²)·csc(π/(2+2s)))/π)`.
    pub fn closed_form_timestep(&self, sigma: f64) -> Result<f64> {
        if self.kind != ScheduleKind::Cosine {
            return Err(Error::Unsupported(
                "closed-form timestep exists only for the cosine schedule".into(),
            ));
        }
        self.check_sigma(sigma)?;
        let s = self.offset;
        let inner = (std::f64::consts::PI / (2.0 + 2.0 * s)).sin() / (1.0 + sigma * sigma).sqrt();
        let t = self.steps as f64 * (1.0 - 2.0 * (1.0 + s) * inner.asin() / std::f64::consts::PI);
        Ok(t.clamp(0.0, self.steps as f64))
    }

    /// Monotone root-finding for `σ²(t) = σ²`; works for any schedule kind.
    pub fn bisect_timestep(&self, sigma: f64) -> Result<f64> {
        self.check_sigma(sigma)?;
        let target = sigma * sigma;
        let tol = BISECTION_TOL_SIGMA_SQ * target.max(1.0);
        let (mut lo, mut hi) = (0.0, self.steps as f64);
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            let diff = self.sigma_sq(mid) - target;
            if diff.abs() <= tol || hi - lo <= f64::EPSILON * self.steps as f64 {
                return Ok(mid);
            }
            if diff < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Solve for the timestep whose noise level matches `sigma`.
    ///
    /// The continuous solution comes from the closed form for the cosine
    /// schedule and from bisection otherwise. The discrete timestep is the
    /// smallest integer whose noise level is at least `sigma`, and the
    /// returned `alpha_bar`/`sigma_achieved` describe that discrete step.
    pub fn get_timestep(&self, sigma: f64) -> Result<TimestepSolution> {
        let t_continuous = match self.kind {
            _ if sigma == 0.0 => 0.0,
            ScheduleKind::Cosine => self.closed_form_timestep(sigma)?,
            ScheduleKind::Linear => self.bisect_timestep(sigma)?,
        };
        let nearest = t_continuous.round();
        let t_discrete = if (t_continuous - nearest).abs() <= INTEGER_SNAP {
            nearest
        } else {
            t_continuous.ceil()
        };
        let t_discrete = (t_discrete.max(0.0) as usize).min(self.steps);
        let mut solution = TimestepSolution::at_step(self, t_discrete)?;
        solution.t_continuous = t_continuous;
        solution.sigma_requested = sigma;
        Ok(solution)
    }
}

/// Outcome of matching a smoothing noise level to a diffusion timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepSolution {
    pub sigma_requested: f64,
    pub t_continuous: f64,
    pub t_discrete: usize,
    /// ᾱ at `t_discrete`.
    pub alpha_bar: f64,
    /// Noise level at `t_discrete`; this is what gets injected and certified.
    pub sigma_achieved: f64,
}

impl TimestepSolution {
    /// Solution pinned to an integer timestep, e.g. `t = 0` for no noise.
    pub fn at_step(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        let tf = t as f64;
        let alpha_bar = schedule.alpha_bar(tf)?;
        let sigma_achieved = schedule.sigma_of_t(tf)?;
        Ok(Self {
            sigma_requested: sigma_achieved,
            t_continuous: tf,
            t_discrete: t,
            alpha_bar,
            sigma_achieved,
        })
    }

    /// `√ᾱ`: multiplying `x + δ` by this gives the diffusion-native noising.
    pub fn scale_factor(&self) -> f64 {
        self.alpha_bar.sqrt()
    }

    pub fn is_noise_free(&self) -> bool {
        self.t_discrete == 0
    }
}

/// Free-function form of [`TimestepSolution::scale_factor`].
pub fn scale_factor(solution: &TimestepSolution) -> f64 {
    solution.scale_factor()
}
