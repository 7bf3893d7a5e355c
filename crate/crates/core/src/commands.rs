//! The operations behind each command-line subcommand.
//!
//! Every `cmd_*` function takes a validated [`RunConfig`] and an output
//! directory, writes its files there, and returns what it wrote.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{to_internal, RunConfig};
use crate::error::{Error, Result};
use crate::oracle::{argmax, boundary_point, soundness_search, Oracle, SearchBudget, Violation};
use crate::pipeline::{
    certify_dataset, mismatch_grid, predict, sampler_compare, with_workers, AccuracyCell,
    BaseClassifier, Point, PredictOutcome,
};
use crate::report::{
    curve_csv, fmt6, write_file, CurvePoint, RunRecord, SigmaMapping, SigmaRun, Timing,
};
use crate::seeding::{stream, Purpose};
use crate::stats::{certified_radius, clopper_pearson_lower};

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const CERTIFY_TABLE_FILE: &str = "certify_table.csv";
pub const CERTIFY_POINTS_FILE: &str = "certify_points.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const ABLATE_FILE: &str = "ablate.csv";
pub const VERIFY_JSON_FILE: &str = "verify.json";
pub const VERIFY_CSV_FILE: &str = "verify.csv";
pub const CURVE_FILE: &str = "curve.csv";

pub const COMPARE_HEADER: &str = "denoiser,sigma,sigma_internal,accuracy,seed_min,seed_max,seeds";
pub const VERIFY_HEADER: &str = "kind,id,label,p_label,radius,evaluations,min_margin,violated";

fn run_pool<T: Send>(config: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    with_workers(config.workers, f)?
}

/// Largest radius (`[-1, 1]` convention) that `n` estimation samples can
/// certify at the achieved noise level.
fn reach_pm1(base: &BaseClassifier, n: u64, alpha_fail: f64) -> Result<f64> {
    let p = clopper_pearson_lower(n, n, alpha_fail)?;
    Ok(certified_radius(base.solution().sigma_achieved, p))
}

/// Certify the dataset at every configured σ.
pub fn run_certify(config: &RunConfig) -> Result<RunRecord> {
    let start = Instant::now();
    let points = config.dataset()?;
    let classifier = config.classifier()?;
    let schedule = config.schedule()?;
    let spec = config.denoiser()?;
    let mut runs = Vec::with_capacity(config.sigmas.len());
    let mut samples = 0u64;
    for &sigma in &config.sigmas {
        let params = config.certify.params(sigma);
        let base = BaseClassifier::new(params.sigma, &spec, &classifier, &schedule)?;
        let results = run_pool(config, || {
            certify_dataset(&points, &base, &params, config.seed)
        })?;
        samples += (params.n0 + params.n) * points.len() as u64;
        runs.push(SigmaRun {
            mapping: SigmaMapping::new(sigma, base.solution()),
            max_radius_01: reach_pm1(&base, params.n, params.alpha_fail)? / 2.0,
            results,
        });
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(RunRecord::new(
        config.clone(),
        runs,
        Timing {
            wall_seconds: wall,
            samples,
            samples_per_second: if wall > 0.0 {
                samples as f64 / wall
            } else {
                0.0
            },
        },
    ))
}

/// Certify, then write the run record, the σ × ε table and per-point rows.
pub fn cmd_certify(config: &RunConfig, out: &Path) -> Result<RunRecord> {
    let record = run_certify(config)?;
    record.check_aggregate()?;
    write_file(out, RUN_RECORD_FILE, &record.to_json()?)?;
    write_file(out, CERTIFY_TABLE_FILE, &record.table_csv())?;
    write_file(out, CERTIFY_POINTS_FILE, &record.points_csv())?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub mapping: SigmaMapping,
    pub point: Point,
    pub outcome: PredictOutcome,
}

/// Smoothed prediction for one dataset point at every configured σ.
pub fn cmd_predict(config: &RunConfig, point_id: u64) -> Result<Vec<PredictReport>> {
    let points = config.dataset()?;
    let point = points
        .into_iter()
        .find(|p| p.id == point_id)
        .ok_or_else(|| Error::config(format!("no point with id {point_id} in the dataset")))?;
    let classifier = config.classifier()?;
    let schedule = config.schedule()?;
    let spec = config.denoiser()?;
    config
        .sigmas
        .iter()
        .map(|&sigma| {
            let params = config.certify.params(sigma);
            let base = BaseClassifier::new(params.sigma, &spec, &classifier, &schedule)?;
            let outcome = run_pool(config, || predict(&point, &base, &params, config.seed))?;
            Ok(PredictReport {
                mapping: SigmaMapping::new(sigma, base.solution()),
                point: point.clone(),
                outcome,
            })
        })
        .collect()
}

/// Accuracy of each configured denoiser at each noise level.
pub fn cmd_compare_samplers(config: &RunConfig, out: &Path) -> Result<Vec<AccuracyCell>> {
    let compare = config
        .compare
        .as_ref()
        .ok_or_else(|| Error::config("the configuration has no [compare] section"))?;
    let sigmas = compare
        .sigmas
        .clone()
        .unwrap_or_else(|| config.sigmas.clone());
    let internal: Vec<f64> = sigmas.iter().map(|s| to_internal(*s)).collect();
    let mixture = config.mixture()?;
    let specs = compare
        .denoisers
        .iter()
        .map(|d| d.build(mixture.model()))
        .collect::<Result<Vec<_>>>()?;
    let points = config.dataset()?;
    let classifier = config.classifier()?;
    let schedule = config.schedule()?;
    let cells = run_pool(config, || {
        sampler_compare(
            &points,
            &internal,
            &specs,
            &classifier,
            &schedule,
            &compare.seeds,
        )
    })?;
    let mut csv = format!("{COMPARE_HEADER}\n");
    for cell in &cells {
        let config_sigma = sigmas[internal.iter().position(|s| *s == cell.sigma).unwrap_or(0)];
        let min = cell.per_seed.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = cell
            .per_seed
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            cell.denoiser,
            fmt6(config_sigma),
            fmt6(cell.sigma),
            fmt6(100.0 * cell.accuracy),
            fmt6(100.0 * min),
            fmt6(100.0 * max),
            cell.per_seed.len()
        );
    }
    write_file(out, COMPARE_FILE, &csv)?;
    Ok(cells)
}

/// Accuracy of mis-calibrated posterior means, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Calibration levels (rows), `[0, 1]` convention.
    pub sigma_train: Vec<f64>,
    /// Evaluation levels (columns), `[0, 1]` convention.
    pub sigma_eval: Vec<f64>,
    pub accuracy: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn header(&self) -> String {
        let mut h = String::from("sigma_train,sigma_train_internal");
        for e in &self.sigma_eval {
            let _ = write!(h, ",eval_{}", fmt6(*e));
        }
        h
    }

    pub fn csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (train, row) in self.sigma_train.iter().zip(&self.accuracy) {
            let _ = write!(out, "{},{}", fmt6(*train), fmt6(to_internal(*train)));
            for v in row {
                let _ = write!(out, ",{}", fmt6(*v));
            }
            out.push('\n');
        }
        out
    }
}

pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<AblationTable> {
    let ablate = config
        .ablate
        .as_ref()
        .ok_or_else(|| Error::config("the configuration has no [ablate] section"))?;
    let eval = ablate
        .sigma_eval
        .clone()
        .unwrap_or_else(|| ablate.sigma_train.clone());
    let to_int = |v: &[f64]| v.iter().map(|s| to_internal(*s)).collect::<Vec<_>>();
    let mixture = config.mixture()?;
    let points = config.dataset()?;
    let classifier = config.classifier()?;
    let schedule = config.schedule()?;
    let grid = run_pool(config, || {
        mismatch_grid(
            &points,
            &to_int(&ablate.sigma_train),
            &to_int(&eval),
            mixture.model(),
            &classifier,
            &schedule,
            &ablate.seeds,
        )
    })?;
    let table = AblationTable {
        sigma_train: ablate.sigma_train.clone(),
        sigma_eval: eval,
        accuracy: grid
            .into_iter()
            .map(|row| row.into_iter().map(|a| 100.0 * a).collect())
            .collect(),
    };
    write_file(out, ABLATE_FILE, &table.csv())?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Searched within the certified radius; must hold.
    Certified,
    /// Near-boundary point searched beyond its radius; should break.
    Inflated,
}

impl CheckKind {
    fn name(self) -> &'static str {
        match self {
            CheckKind::Certified => "certified",
            CheckKind::Inflated => "inflated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub kind: CheckKind,
    pub id: u64,
    pub x: Vec<f64>,
    pub label: usize,
    pub p_label: f64,
    /// Searched radius, `[-1, 1]` convention.
    pub radius: f64,
    pub evaluations: usize,
    pub min_margin: f64,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub mapping: SigmaMapping,
    pub budget: SearchBudget,
    pub inflation: f64,
    pub checks: Vec<PointCheck>,
}

impl VerifyReport {
    fn of(&self, kind: CheckKind) -> impl Iterator<Item = &PointCheck> {
        self.checks.iter().filter(move |c| c.kind == kind)
    }

    /// Violations found inside certified radii.
    pub fn violations(&self) -> usize {
        self.of(CheckKind::Certified)
            .filter(|c| c.violation.is_some())
            .count()
    }

    /// Inflated checks in which the search found a label change.
    pub fn inflated_detected(&self) -> usize {
        self.of(CheckKind::Inflated)
            .filter(|c| c.violation.is_some())
            .count()
    }

    pub fn inflated_checks(&self) -> usize {
        self.of(CheckKind::Inflated).count()
    }

    /// Sound at every certified radius, and the search caught at least one
    /// inflated radius whenever any were tried.
    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v > 0 {
            return Err(Error::Verification(format!(
                "{v} violation(s) inside certified radii"
            )));
        }
        if self.inflated_checks() > 0 && self.inflated_detected() == 0 {
            return Err(Error::Verification(
                "no violation found at any inflated radius".into(),
            ));
        }
        Ok(())
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{VERIFY_HEADER}\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.kind.name(),
                c.id,
                c.label,
                fmt6(c.p_label),
                fmt6(c.radius),
                c.evaluations,
                fmt6(c.min_margin),
                c.violation.is_some()
            );
        }
        out
    }
}

impl PointCheck {
    fn pending(kind: CheckKind, id: u64, x: Vec<f64>, label: usize, p_label: f64) -> Self {
        Self {
            kind,
            id,
            x,
            label,
            p_label,
            radius: 0.0,
            evaluations: 0,
            min_margin: f64::INFINITY,
            violation: None,
        }
    }

    /// Search the ball of `radius` around `x` for a label change.
    fn search(
        mut self,
        radius: f64,
        oracle: &Oracle,
        budget: &SearchBudget,
        seed: u64,
    ) -> Result<Self> {
        self.radius = radius;
        if radius > 0.0 {
            let atlas = oracle.atlas(&self.x, radius)?;
            let key = self.id ^ ((self.kind as u64) << 63);
            let report = soundness_search(
                &self.x,
                radius,
                self.label,
                |z| atlas.probabilities(z),
                budget,
                &mut stream(seed, key, Purpose::Search, 0),
            )?;
            self.evaluations = report.evaluations;
            self.min_margin = report.min_margin;
            self.violation = report.violations.into_iter().next();
        }
        Ok(self)
    }
}

/// Search for label changes of the exactly evaluated smoothed classifier:
/// inside every certified radius, and beyond inflated radii of constructed
/// near-boundary points.
pub fn run_verify(config: &RunConfig) -> Result<VerifyReport> {
    let v = &config.verify;
    let sigma = v.sigma.unwrap_or(config.sigmas[0]);
    let mut points = config.dataset()?;
    if let Some(limit) = v.points {
        if limit == 0 {
            return Err(Error::EmptyDataset);
        }
        points.truncate(limit);
    }
    let classifier = config.classifier()?;
    let schedule = config.schedule()?;
    let spec = config.denoiser()?;
    let grid = v.grid(points[0].x.len())?;
    let oracle = Oracle::new(to_internal(sigma), &spec, &classifier, &schedule, grid)?;
    let mapping = SigmaMapping::new(sigma, &schedule.get_timestep(to_internal(sigma))?);
    let budget = v.budget();
    let noise = oracle.sigma();

    run_pool(config, || {
        let certified = points
            .par_iter()
            .map(|p| {
                let probs = oracle.class_probabilities(&p.x)?;
                let label = argmax(&probs);
                PointCheck::pending(CheckKind::Certified, p.id, p.x.clone(), label, probs[label])
                    .search(
                        certified_radius(noise, probs[label]),
                        &oracle,
                        &budget,
                        config.seed,
                    )
            })
            .collect::<Result<Vec<_>>>()?;

        // Pair each point with the next one of a different smoothed label
        // and walk the segment to where the first label has `boundary_p`.
        let mut pairs = Vec::new();
        for (i, a) in certified.iter().enumerate() {
            if pairs.len() == v.boundary_points {
                break;
            }
            if let Some(b) = certified[i + 1..].iter().find(|b| b.label != a.label) {
                pairs.push((a, b));
            }
        }
        let inflated = pairs
            .par_iter()
            .map(|(a, b)| -> Result<Option<PointCheck>> {
                let mid: Vec<f64> = a.x.iter().zip(&b.x).map(|(u, w)| 0.5 * (u + w)).collect();
                let half = 0.5
                    * a.x
                        .iter()
                        .zip(&b.x)
                        .map(|(u, w)| (u - w) * (u - w))
                        .sum::<f64>()
                        .sqrt();
                let segment = oracle.atlas(&mid, half)?;
                let near = boundary_point(&a.x, &b.x, a.label, v.boundary_p, |z| {
                    segment.probabilities(z)
                })?;
                let Some(near) = near else { return Ok(None) };
                let p = segment.probabilities(&near)?[a.label];
                PointCheck::pending(CheckKind::Inflated, a.id, near, a.label, p)
                    .search(
                        v.inflation * certified_radius(noise, p),
                        &oracle,
                        &budget,
                        config.seed,
                    )
                    .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut checks = certified;
        checks.extend(inflated.into_iter().flatten());
        Ok(VerifyReport {
            mapping,
            budget,
            inflation: v.inflation,
            checks,
        })
    })
}

/// Run the verification suite and write its report. The report is written
/// even when verification fails; the failure is then returned.
pub fn cmd_verify(config: &RunConfig, out: &Path) -> Result<VerifyReport> {
    let report = run_verify(config)?;
    write_verify(&report, out)?;
    report.check()?;
    Ok(report)
}

pub fn write_verify(report: &VerifyReport, out: &Path) -> Result<()> {
    write_file(
        out,
        VERIFY_JSON_FILE,
        &serde_json::to_string_pretty(report)?,
    )?;
    write_file(out, VERIFY_CSV_FILE, &report.csv())?;
    Ok(())
}

/// Certified-accuracy curves from a saved run record.
pub fn cmd_curve(record: &Path, out: &Path) -> Result<Vec<CurvePoint>> {
    let record = RunRecord::load(record)?;
    let points = record.curve(record.config.curve_step);
    write_file(out, CURVE_FILE, &curve_csv(&points))?;
    Ok(points)
}
