use ddsmooth::commands::{
    cmd_certify, cmd_compare_samplers, cmd_curve, cmd_predict, RUN_RECORD_FILE,
};
use ddsmooth::config::{to_internal, DenoiserConfig, RunConfig};
use ddsmooth::oracle::exact_class_probabilities;
use ddsmooth::report::RunRecord;
use ddsmooth::stats::{clopper_pearson_lower, gaussian_quantile};
use ddsmooth::*;

const BASE: &str = r#"
seed = 9
sigmas = [0.25, 0.5]
epsilons = [0.0, 0.1, 0.3, 2.0]
curve_step = 0.05
[mixture]
weights = [0.5, 0.5]
means = [[-0.6, 0.0], [0.6, 0.0]]
tau = 0.15
labels = [0, 1]
[dataset]
size = 30
[certify]
n0 = 50
n = 3000
"#;

fn base() -> RunConfig {
    RunConfig::parse(BASE).unwrap()
}

#[test]
fn certify_table_and_curves_have_the_expected_shape() {
    let config = base();
    let dir = tempfile::tempdir().unwrap();
    let record = cmd_certify(&config, dir.path()).unwrap();
    for run in &record.runs {
        // Largest certifiable radius for n unanimous draws at the achieved level.
        let p = clopper_pearson_lower(3000, 3000, 0.001).unwrap();
        let reach = run.mapping.sigma_achieved * gaussian_quantile(p).unwrap() / 2.0;
        assert!((run.max_radius_01 - reach).abs() < 1e-12);
        assert!(run.mapping.sigma_achieved >= to_internal(run.mapping.sigma));
    }
    // ε = 2 is beyond every reach: the column is zero.
    assert!(record.aggregate.iter().all(|r| r.certified[3] == 0.0));

    let points = cmd_curve(&dir.path().join(RUN_RECORD_FILE), dir.path()).unwrap();
    for run in &record.runs {
        let curve: Vec<_> = points
            .iter()
            .filter(|p| p.sigma == run.mapping.sigma)
            .collect();
        assert_eq!(curve.first().unwrap().epsilon, 0.0);
        assert_eq!(curve.last().unwrap().epsilon, run.max_radius_01);
        assert!(curve
            .windows(2)
            .all(|w| w[1].certified_accuracy <= w[0].certified_accuracy));
        assert!(curve.iter().all(|p| p.envelope >= p.certified_accuracy));
    }
}

#[test]
fn tampered_records_are_rejected() {
    let config = base();
    let dir = tempfile::tempdir().unwrap();
    let record = cmd_certify(&config, dir.path()).unwrap();
    let path = dir.path().join(RUN_RECORD_FILE);
    assert_eq!(RunRecord::load(&path).unwrap(), record);

    let mut bad = record.clone();
    bad.aggregate[0].clean += 1.0;
    std::fs::write(&path, bad.to_json().unwrap()).unwrap();
    assert!(matches!(RunRecord::load(&path), Err(Error::Config(_))));
}

#[test]
fn predict_abstains_on_the_symmetric_point_and_is_confident_far_away() {
    let mut config = base();
    config.dataset.size = 1;
    config.sigmas = vec![0.5];
    config.certify.n = 5000;
    let classifier = config.classifier().unwrap();
    let schedule = config.schedule().unwrap();
    let spec = config.denoiser().unwrap();
    let sigma = to_internal(0.5);
    let base = BaseClassifier::new(sigma, &spec, &classifier, &schedule).unwrap();
    let params = config.certify.params(0.5);

    let middle = Point::new(0, vec![0.0, 0.3], None).unwrap();
    let tie = ddsmooth::pipeline::predict(&middle, &base, &params, 1).unwrap();
    assert_eq!(tie.label, None);

    let far = Point::new(1, vec![0.9, 0.0], None).unwrap();
    let exact = exact_class_probabilities(
        &far,
        sigma,
        &spec,
        &classifier,
        &schedule,
        QuadratureGrid::new(QuadratureScheme::TensorGrid, 32, 2).unwrap(),
    )
    .unwrap();
    assert!(exact[1] > 0.8, "{exact:?}");
    let sure = ddsmooth::pipeline::predict(&far, &base, &params, 1).unwrap();
    assert_eq!(sure.label, Some(1));

    let first = cmd_predict(&config, 0).unwrap();
    assert_eq!(first, cmd_predict(&config, 0).unwrap());
    assert!(matches!(cmd_predict(&config, 5), Err(Error::Config(_))));
}

#[test]
fn single_step_deterministic_sampler_matches_one_shot() {
    let mut config = base();
    config.dataset.size = 400;
    config.compare = Some(ddsmooth::config::CompareConfig {
        sigmas: None,
        denoisers: vec![
            DenoiserConfig::of(DenoiserKind::OneShotPosteriorMean),
            DenoiserConfig {
                kind: DenoiserKind::DeterministicMultiStep,
                sigma_train: None,
                steps: Some(1),
            },
            DenoiserConfig::of(DenoiserKind::DeterministicMultiStep),
        ],
        seeds: vec![1, 2],
    });
    let dir = tempfile::tempdir().unwrap();
    let cells = cmd_compare_samplers(&config, dir.path()).unwrap();
    let n = config.sigmas.len();
    assert_eq!(cells[..n], {
        let mut same = cells[n..2 * n].to_vec();
        for (s, o) in same.iter_mut().zip(&cells[..n]) {
            s.denoiser = o.denoiser.clone();
        }
        same
    });
    let again = cmd_compare_samplers(&config, dir.path()).unwrap();
    assert_eq!(cells, again);
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * n);
}
