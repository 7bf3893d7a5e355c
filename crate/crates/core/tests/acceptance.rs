//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) before asserting, so a full run lists every outcome.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ddsmooth::commands::{
    cmd_ablate, cmd_certify, cmd_compare_samplers, run_verify, CERTIFY_POINTS_FILE,
    CERTIFY_TABLE_FILE,
};
use ddsmooth::config::{to_internal, DenoiserConfig, RunConfig};
use ddsmooth::pipeline::{certify, sample_dataset};
use ddsmooth::stats::{
    binom_p_test, certified_radius, clopper_pearson_lower, gaussian_quantile, normal_cdf,
};
use ddsmooth::*;
use rand::Rng;
use rand_distr::Binomial;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap()
}

fn verdict(id: u32, title: &str, pass: bool, elapsed: Duration, detail: String) {
    let _ = writeln!(
        std::io::stderr(),
        "[{id}] {title}: {} ({detail}; {:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "{title}: {detail}");
}

#[test]
fn timestep_solver() {
    let start = Instant::now();
    let schedule = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let t_steps = schedule.steps() as f64;
    let mut worst_t = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for sigma in [0.25, 0.5, 1.0, 2.0] {
        let closed = schedule.closed_form_timestep(sigma).unwrap();
        let bisected = schedule.bisect_timestep(sigma).unwrap();
        worst_t = worst_t.max((closed - bisected).abs() / t_steps);
        worst_sigma = worst_sigma.max((schedule.sigma_of_t(closed).unwrap() - sigma).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "timestep solver",
        worst_t <= 1e-6 && worst_sigma <= 1e-7 && elapsed < Duration::from_secs(1),
        elapsed,
        format!("max |Δt|/T {worst_t:.2e}, max |Δσ| {worst_sigma:.2e}"),
    );
}

fn brute_binom_p(k: u64, n: u64, p: f64) -> f64 {
    let pmf = |i: u64| {
        let mut c = 1.0f64;
        for j in 0..i {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
    };
    let lower: f64 = (0..=k).map(pmf).sum();
    let upper: f64 = (k..=n).map(pmf).sum();
    (2.0 * lower.min(upper)).min(1.0)
}

#[test]
fn statistical_exactness() {
    let start = Instant::now();
    let mut worst_test = 0.0f64;
    for n in 1..=20u64 {
        for k in 0..=n {
            for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let got = binom_p_test(k, n, p).unwrap();
                worst_test = worst_test.max((got - brute_binom_p(k, n, p)).abs());
            }
        }
    }
    let mut worst_cp = 0.0f64;
    for n in [1u64, 2, 5, 10, 100, 1000, 10_000, 100_000] {
        for alpha in [0.001, 0.01, 0.05] {
            let got = clopper_pearson_lower(n, n, alpha).unwrap();
            worst_cp = worst_cp.max((got - alpha.powf(1.0 / n as f64)).abs());
        }
    }
    let mut worst_phi = 0.0f64;
    let m = 10_000;
    for i in 1..=m {
        let p = i as f64 / (m + 1) as f64;
        worst_phi = worst_phi.max((normal_cdf(gaussian_quantile(p).unwrap()) - p).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "statistical exactness",
        worst_test <= 1e-12 && worst_cp <= 1e-10 && worst_phi <= 1e-9
            && elapsed < Duration::from_secs(10),
        elapsed,
        format!(
            "binomial test {worst_test:.1e}, Clopper-Pearson {worst_cp:.1e}, Φ round trip {worst_phi:.1e}"
        ),
    );
}

#[test]
fn clopper_pearson_coverage() {
    let start = Instant::now();
    let alpha = 0.001;
    let draws = 10_000u32;
    let bound = alpha + 3.0 * (alpha / draws as f64).sqrt();
    let mut rng = seeding::stream(3, 0, seeding::Purpose::Trial, 0);
    let mut worst = 0.0f64;
    let mut rates = Vec::new();
    for p in [0.6, 0.8, 0.95] {
        for n in [100u64, 1000] {
            let dist = Binomial::new(n, p).unwrap();
            let misses = (0..draws)
                .filter(|_| clopper_pearson_lower(rng.sample(dist), n, alpha).unwrap() > p)
                .count();
            let rate = misses as f64 / draws as f64;
            worst = worst.max(rate);
            rates.push(format!("{p}/{n}: {rate}"));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "Clopper-Pearson coverage",
        worst <= bound && elapsed < Duration::from_secs(60),
        elapsed,
        format!(
            "worst non-coverage {worst} vs bound {bound:.5}; {}",
            rates.join(", ")
        ),
    );
}

#[test]
fn certification_soundness() {
    let start = Instant::now();
    let config = config("verify_2d.toml");
    assert_eq!(config.dataset.size, 500);
    assert_eq!(config.mixture.weights.len(), 4);
    let report = run_verify(&config).unwrap();
    let certified = report.checks.len() - report.inflated_checks();
    let elapsed = start.elapsed();
    verdict(
        4,
        "certification soundness",
        certified == 500
            && report.violations() == 0
            && report.inflated_detected() >= 1
            && elapsed < Duration::from_secs(600),
        elapsed,
        format!(
            "{certified} points, {} violations inside certified radii; {} of {} inflated radii broken",
            report.violations(),
            report.inflated_detected(),
            report.inflated_checks()
        ),
    );
}

#[test]
fn sampled_radius_never_exceeds_exact() {
    let start = Instant::now();
    let config = config("verify_2d.toml");
    let sigma = to_internal(config.sigmas[0]);
    let classifier = config.classifier().unwrap();
    let schedule = config.schedule().unwrap();
    let spec = config.denoiser().unwrap();
    let oracle = Oracle::new(
        sigma,
        &spec,
        &classifier,
        &schedule,
        QuadratureGrid::new(QuadratureScheme::TensorGrid, 64, 2).unwrap(),
    )
    .unwrap();
    // First dataset point whose exact top-class probability is moderate.
    let (point, label, p_exact) = sample_dataset(&config.mixture().unwrap(), 200, 5)
        .into_iter()
        .find_map(|p| {
            let probs = oracle.class_probabilities(&p.x).unwrap();
            let label = if probs[1] > probs[0] { 1 } else { 0 };
            (0.7..0.95)
                .contains(&probs[label])
                .then_some((p, label, probs[label]))
        })
        .unwrap();
    let exact = certified_radius(oracle.sigma(), p_exact);
    let base = BaseClassifier::new(sigma, &spec, &classifier, &schedule).unwrap();
    let params = CertifyParams {
        sigma,
        n0: 100,
        n: 100_000,
        alpha_fail: 0.001,
        eta: 0.001,
    };
    let trials = 1000u64;
    let sound = (0..trials)
        .filter(|&trial| {
            let r = certify(&point, &base, &params, 10_000 + trial).unwrap();
            match r.label {
                None => true,
                Some(l) => l == label && r.radius_pm1 <= exact,
            }
        })
        .count();
    let rate = sound as f64 / trials as f64;
    let elapsed = start.elapsed();
    verdict(
        5,
        "sampled radius within exact radius",
        rate >= 0.998 && elapsed < Duration::from_secs(900),
        elapsed,
        format!("{sound}/{trials} trials sound at p_A = {p_exact:.4}, exact radius {exact:.4}"),
    );
}

#[test]
fn calibration_mismatch_diagonal() {
    let start = Instant::now();
    let config = config("ablate_4d.toml");
    let out = tempfile::tempdir().unwrap();
    let table = cmd_ablate(&config, out.path()).unwrap();
    let levels = [0.25, 0.5, 1.0];
    let row = |s: f64| table.sigma_train.iter().position(|v| *v == s).unwrap();
    let col = |s: f64| table.sigma_eval.iter().position(|v| *v == s).unwrap();
    let mut margin = f64::INFINITY;
    for &eval in &levels {
        let j = col(eval);
        let diag = table.accuracy[row(eval)][j];
        for &train in levels.iter().filter(|t| **t != eval) {
            margin = margin.min(diag - table.accuracy[row(train)][j]);
        }
    }
    let classifier = config.classifier().unwrap();
    let points = config.dataset().unwrap();
    let clean = 100.0
        * points
            .iter()
            .filter(|p| Some(classifier.classify(&p.x)) == p.true_label)
            .count() as f64
        / points.len() as f64;
    let elapsed = start.elapsed();
    verdict(
        6,
        "calibration mismatch diagonal",
        margin >= 5.0 && clean >= 95.0 && elapsed < Duration::from_secs(300),
        elapsed,
        format!("smallest column margin {margin:.2} points, clean Bayes accuracy {clean:.2}%"),
    );
}

#[test]
fn one_shot_beats_ancestral() {
    let start = Instant::now();
    let mut config = config("certify_2d.toml");
    config.dataset.size = 10_000;
    let compare = config.compare.as_mut().unwrap();
    compare.sigmas = Some(vec![1.0]);
    compare.denoisers = vec![
        DenoiserConfig::of(DenoiserKind::OneShotPosteriorMean),
        DenoiserConfig::of(DenoiserKind::AncestralMultiStep),
    ];
    assert_eq!(compare.seeds.len(), 5);
    let out = tempfile::tempdir().unwrap();
    let cells = cmd_compare_samplers(&config, out.path()).unwrap();
    let (one, anc) = (&cells[0], &cells[1]);
    let margin = one
        .per_seed
        .iter()
        .zip(&anc.per_seed)
        .map(|(a, b)| 100.0 * (a - b))
        .fold(f64::INFINITY, f64::min);
    let elapsed = start.elapsed();
    verdict(
        7,
        "one-shot beats ancestral",
        margin >= 2.0 && elapsed < Duration::from_secs(300),
        elapsed,
        format!(
            "one-shot {:.2}%, ancestral {:.2}%, smallest per-seed margin {margin:.2} points",
            100.0 * one.accuracy,
            100.0 * anc.accuracy
        ),
    );
}

fn certify_config() -> RunConfig {
    let mut config = config("certify_2d.toml");
    config.certify.n = 10_000;
    config
}

#[test]
fn certified_accuracy_table_shape() {
    let start = Instant::now();
    let config = certify_config();
    let out = tempfile::tempdir().unwrap();
    let record = cmd_certify(&config, out.path()).unwrap();
    record.check_aggregate().unwrap();
    let mut problems = Vec::new();
    for (run, row) in record.runs.iter().zip(&record.aggregate) {
        if row.certified.windows(2).any(|w| w[1] > w[0]) {
            problems.push(format!("sigma {} increases in ε", row.sigma));
        }
        for (eps, acc) in record.epsilons.iter().zip(&row.certified) {
            if *eps > run.max_radius_01 && *acc != 0.0 {
                problems.push(format!("sigma {} nonzero at ε {eps}", row.sigma));
            }
        }
    }
    let beyond = record
        .runs
        .iter()
        .all(|r| record.epsilons.iter().any(|e| *e > r.max_radius_01));
    let at_zero: Vec<f64> = record.aggregate.iter().map(|r| r.certified[0]).collect();
    let smallest_first = at_zero[1..].iter().all(|v| at_zero[0] > *v);
    let elapsed = start.elapsed();
    verdict(
        8,
        "certified accuracy table",
        problems.is_empty() && beyond && smallest_first && elapsed < Duration::from_secs(600),
        elapsed,
        format!(
            "certified at ε=0 by σ {:?}: {:?}; {}",
            config.sigmas,
            at_zero
                .iter()
                .map(|v| format!("{v:.1}%"))
                .collect::<Vec<_>>(),
            if problems.is_empty() {
                "monotone, zero past the reach".to_string()
            } else {
                problems.join("; ")
            }
        ),
    );
}

#[test]
fn worker_count_does_not_change_output() {
    let start = Instant::now();
    let mut config = certify_config();
    let mut outputs = Vec::new();
    for workers in [1, 8] {
        config.workers = workers;
        let out = tempfile::tempdir().unwrap();
        cmd_certify(&config, out.path()).unwrap();
        let read = |name| std::fs::read(out.path().join(name)).unwrap();
        outputs.push((read(CERTIFY_TABLE_FILE), read(CERTIFY_POINTS_FILE)));
    }
    let identical = outputs[0] == outputs[1];
    let elapsed = start.elapsed();
    verdict(
        9,
        "determinism across worker counts",
        identical && elapsed < Duration::from_secs(300),
        elapsed,
        format!(
            "1 vs 8 workers: CSV outputs {}",
            if identical {
                "byte-identical"
            } else {
                "differ"
            }
        ),
    );
}
