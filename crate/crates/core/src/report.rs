//! Run records and the CSV tables derived from them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{certified_accuracy, clean_accuracy, CertificationResult};
use crate::schedule::TimestepSolution;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Format with six significant digits, like C's `%.6g`.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!(
            "{}e{sign}{:02}",
            trim_zeros(mantissa.to_string()),
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// How a configured noise level reached the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaMapping {
    /// Configured level, `[0, 1]` convention.
    pub sigma: f64,
    /// Requested level, `[-1, 1]` convention.
    pub sigma_internal: f64,
    pub t_continuous: f64,
    pub t_discrete: usize,
    pub alpha_bar: f64,
    /// Level actually injected and certified, `[-1, 1]` convention.
    pub sigma_achieved: f64,
}

impl SigmaMapping {
    pub fn new(sigma: f64, solution: &TimestepSolution) -> Self {
        Self {
            sigma,
            sigma_internal: solution.sigma_requested,
            t_continuous: solution.t_continuous,
            t_discrete: solution.t_discrete,
            alpha_bar: solution.alpha_bar,
            sigma_achieved: solution.sigma_achieved,
        }
    }

    /// One-line description for report headers.
    pub fn describe(&self) -> String {
        format!(
            "sigma {} ([0,1] input) -> {} ([-1,1] input) -> t* {} (t = {}) -> achieved {}",
            fmt6(self.sigma),
            fmt6(self.sigma_internal),
            fmt6(self.t_continuous),
            self.t_discrete,
            fmt6(self.sigma_achieved)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRun {
    pub mapping: SigmaMapping,
    /// Largest radius any point can receive at this level, `[0, 1]` convention.
    pub max_radius_01: f64,
    pub results: Vec<CertificationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sigma: f64,
    /// Percent of points predicted correctly without abstaining.
    pub clean: f64,
    /// Percent certified at each ε of the record's grid.
    pub certified: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub samples: u64,
    pub samples_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub epsilons: Vec<f64>,
    pub runs: Vec<SigmaRun>,
    pub aggregate: Vec<AggregateRow>,
    pub timing: Timing,
}

pub const CERTIFY_POINTS_HEADER: &str =
    "sigma,sigma_achieved,id,true_label,label,candidate,hits,n,p_lower,radius_pm1,radius_01";
pub const CURVE_HEADER: &str = "sigma,epsilon,certified_accuracy,envelope,envelope_sigma";

fn percent(fraction: f64) -> f64 {
    100.0 * fraction
}

/// The aggregate table implied by per-point results.
pub fn aggregate(runs: &[SigmaRun], epsilons: &[f64]) -> Vec<AggregateRow> {
    runs.iter()
        .map(|run| AggregateRow {
            sigma: run.mapping.sigma,
            clean: percent(clean_accuracy(&run.results)),
            certified: epsilons
                .iter()
                .map(|&e| percent(certified_accuracy(&run.results, e)))
                .collect(),
        })
        .collect()
}

/// Header of the certified-accuracy table for an ε grid.
pub fn table_header(epsilons: &[f64]) -> String {
    let mut h = String::from("sigma,sigma_internal,sigma_achieved,t_discrete,max_radius,clean");
    for e in epsilons {
        let _ = write!(h, ",eps_{}", fmt6(*e));
    }
    h
}

impl RunRecord {
    pub fn new(config: RunConfig, runs: Vec<SigmaRun>, timing: Timing) -> Self {
        let epsilons = config.epsilons.clone();
        let aggregate = aggregate(&runs, &epsilons);
        Self {
            version: VERSION.to_string(),
            config,
            epsilons,
            runs,
            aggregate,
            timing,
        }
    }

    /// Recompute the aggregate from the per-point rows and require an exact match.
    pub fn check_aggregate(&self) -> Result<()> {
        if aggregate(&self.runs, &self.epsilons) == self.aggregate {
            Ok(())
        } else {
            Err(Error::config(
                "run record aggregate does not match its per-point results",
            ))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: RunRecord = serde_json::from_str(&text)?;
        record.check_aggregate()?;
        Ok(record)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows σ, columns ε, values certified accuracy in percent.
    pub fn table_csv(&self) -> String {
        let mut out = table_header(&self.epsilons);
        out.push('\n');
        for (run, row) in self.runs.iter().zip(&self.aggregate) {
            let m = &run.mapping;
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                fmt6(m.sigma),
                fmt6(m.sigma_internal),
                fmt6(m.sigma_achieved),
                m.t_discrete,
                fmt6(run.max_radius_01),
                fmt6(row.clean)
            );
            for v in &row.certified {
                let _ = write!(out, ",{}", fmt6(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn points_csv(&self) -> String {
        let mut out = format!("{CERTIFY_POINTS_HEADER}\n");
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |l| l.to_string());
        for run in &self.runs {
            for r in &run.results {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    fmt6(run.mapping.sigma),
                    fmt6(run.mapping.sigma_achieved),
                    r.id,
                    opt(r.true_label, ""),
                    opt(r.label, "abstain"),
                    r.candidate,
                    r.hits,
                    r.n,
                    fmt6(r.p_lower),
                    fmt6(r.radius_pm1),
                    fmt6(r.radius_01)
                );
            }
        }
        out
    }

    /// Certified accuracy against ε for each σ, on a grid of spacing
    /// `step` that ends at the σ's maximum certifiable radius, with the
    /// upper envelope over all σ.
    pub fn curve(&self, step: f64) -> Vec<CurvePoint> {
        let mut points = Vec::new();
        for run in &self.runs {
            let reach = run.max_radius_01;
            let mut eps: Vec<f64> = (0..)
                .map(|k| k as f64 * step)
                .take_while(|e| *e < reach)
                .collect();
            eps.push(reach);
            for e in eps {
                let (envelope, envelope_sigma) = self
                    .runs
                    .iter()
                    .map(|r| (percent(certified_accuracy(&r.results, e)), r.mapping.sigma))
                    .fold((f64::NEG_INFINITY, f64::NAN), |best, cur| {
                        if cur.0 > best.0 {
                            cur
                        } else {
                            best
                        }
                    });
                points.push(CurvePoint {
                    sigma: run.mapping.sigma,
                    epsilon: e,
                    certified_accuracy: percent(certified_accuracy(&run.results, e)),
                    envelope,
                    envelope_sigma,
                });
            }
        }
        points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    pub epsilon: f64,
    pub certified_accuracy: f64,
    /// Best certified accuracy over all σ at this ε.
    pub envelope: f64,
    /// The σ attaining the envelope, earliest in the grid on ties.
    pub envelope_sigma: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt6(p.sigma),
            fmt6(p.epsilon),
            fmt6(p.certified_accuracy),
            fmt6(p.envelope),
            fmt6(p.envelope_sigma)
        );
    }
    out
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
