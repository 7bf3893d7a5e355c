//! Smoothed classification: noise injection, denoising and classification
//! composed into a base classifier, plus the PREDICT and CERTIFY procedures.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{Classifier, LabeledMixture};
use crate::denoise::{DenoiserSpec, PreparedDenoiser};
use crate::error::{check_dim, Error, Result};
use crate::mixture::MixtureModel;
use crate::schedule::{NoiseSchedule, TimestepSolution};
use crate::seeding::{chunks, stream, Purpose};
use crate::stats::{binom_p_test, certified_radius, clopper_pearson_lower, CertifyParams};

/// A data vector in `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: u64,
    pub x: Vec<f64>,
    #[serde(default)]
    pub true_label: Option<usize>,
}

impl Point {
    pub fn new(id: u64, x: Vec<f64>, true_label: Option<usize>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::config(format!("point {id} has no coordinates")));
        }
        if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::config(format!("point {id} leaves [-1, 1]^d")));
        }
        Ok(Self { id, x, true_label })
    }
}

/// `size` labeled points drawn from `mixture`; point `i` depends only on
/// `(seed, i)`, so datasets of different sizes share prefixes.
pub fn sample_dataset(mixture: &LabeledMixture, size: usize, seed: u64) -> Vec<Point> {
    (0..size as u64)
        .map(|id| {
            let mut rng = stream(seed, id, Purpose::Dataset, 0);
            let (k, x) = mixture.model().sample(&mut rng);
            Point {
                id,
                x,
                true_label: Some(mixture.label_of(k)),
            }
        })
        .collect()
}

/// `x ↦ classifier(denoise(√ᾱ(x + δ)))` at one noise level.
#[derive(Clone)]
pub struct BaseClassifier<'a> {
    solution: TimestepSolution,
    denoiser: PreparedDenoiser,
    classifier: &'a dyn Classifier,
}

impl<'a> BaseClassifier<'a> {
    pub fn new(
        sigma: f64,
        denoiser: &DenoiserSpec,
        classifier: &'a dyn Classifier,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if let Some(model) = denoiser.model() {
            check_dim(classifier.dim(), model.dim())?;
        }
        let solution = schedule.get_timestep(sigma)?;
        Ok(Self {
            denoiser: denoiser.prepare(&solution, schedule)?,
            solution,
            classifier,
        })
    }

    pub fn solution(&self) -> &TimestepSolution {
        &self.solution
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn is_deterministic(&self) -> bool {
        self.denoiser.is_deterministic()
    }

    /// The deterministic map `z ↦ classifier(denoise(z))` applied to an
    /// already-noised input `z = x + δ`.
    pub fn decide<R: Rng + ?Sized>(&self, z: &[f64], denoised: &mut [f64], rng: &mut R) -> usize {
        self.denoiser.denoise_into(z, denoised, rng);
        self.classifier.classify(denoised)
    }

    /// One draw of `δ ~ N(0, σ²I)` followed by denoising and classification.
    /// Buffers must have the classifier's dimension.
    pub fn sample_label<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
        noised: &mut [f64],
        denoised: &mut [f64],
    ) -> usize {
        let sigma = self.solution.sigma_achieved;
        for (z, v) in noised.iter_mut().zip(x) {
            let e: f64 = StandardNormal.sample(rng);
            *z = v + sigma * e;
        }
        self.decide(noised, denoised, rng)
    }

    /// Per-class counts over `n` noise draws addressed by `(master, key, purpose)`.
    pub fn tally(
        &self,
        x: &[f64],
        n: u64,
        master: u64,
        key: u64,
        purpose: Purpose,
    ) -> Result<Vec<u64>> {
        check_dim(self.dim(), x.len())?;
        let classes = self.num_classes();
        let chunk_list: Vec<(u64, u64)> = chunks(n).collect();
        let counts = chunk_list
            .into_par_iter()
            .map(|(chunk, len)| {
                let mut rng = stream(master, key, purpose, chunk);
                let mut noised = vec![0.0; x.len()];
                let mut denoised = vec![0.0; x.len()];
                let mut counts = vec![0u64; classes];
                for _ in 0..len {
                    counts[self.sample_label(x, &mut rng, &mut noised, &mut denoised)] += 1;
                }
                counts
            })
            .reduce(
                || vec![0u64; classes],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
                    a
                },
            );
        Ok(counts)
    }
}

/// A single draw of the base classifier at `point`.
pub fn noise_and_classify<R: Rng + ?Sized>(
    point: &Point,
    sigma: f64,
    denoiser: &DenoiserSpec,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<usize> {
    let base = BaseClassifier::new(sigma, denoiser, classifier, schedule)?;
    check_dim(base.dim(), point.x.len())?;
    let mut noised = vec![0.0; point.x.len()];
    let mut denoised = vec![0.0; point.x.len()];
    Ok(base.sample_label(&point.x, rng, &mut noised, &mut denoised))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutcome {
    /// `None` means abstain.
    pub label: Option<usize>,
    pub counts: Vec<u64>,
    pub p_value: f64,
}

/// Index of the largest count (lowest index on ties) and the runner-up count.
fn top_two(counts: &[u64]) -> (usize, u64, u64) {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    let second = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    (best, counts[best], second)
}

fn check_params(params: &CertifyParams, base: &BaseClassifier) -> Result<()> {
    params.validate()?;
    let want = base.solution().sigma_requested;
    if (params.sigma - want).abs() > 1e-12 * want.max(1.0) {
        return Err(Error::config(format!(
            "parameters are for sigma {} but the base classifier uses {}",
            params.sigma, want
        )));
    }
    Ok(())
}

/// Majority vote over `params.n` draws; abstains unless a two-sided
/// binomial test of the top two counts is significant at `params.eta`.
pub fn predict(
    point: &Point,
    base: &BaseClassifier,
    params: &CertifyParams,
    master: u64,
) -> Result<PredictOutcome> {
    check_params(params, base)?;
    let counts = base.tally(&point.x, params.n, master, point.id, Purpose::Prediction)?;
    let (top, n_a, n_b) = top_two(&counts);
    let p_value = binom_p_test(n_a, n_a + n_b, 0.5)?;
    Ok(PredictOutcome {
        label: (p_value <= params.eta).then_some(top),
        counts,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub id: u64,
    pub true_label: Option<usize>,
    /// `None` means abstain.
    pub label: Option<usize>,
    /// Class chosen by the selection round.
    pub candidate: usize,
    pub hits: u64,
    pub n: u64,
    pub p_lower: f64,
    /// Radius in the `[-1, 1]` input convention.
    pub radius_pm1: f64,
    /// Radius in the `[0, 1]` input convention.
    pub radius_01: f64,
}

impl CertificationResult {
    pub fn is_abstain(&self) -> bool {
        self.label.is_none()
    }

    pub fn is_correct(&self) -> bool {
        self.label.is_some() && self.label == self.true_label
    }

    /// Counts towards certified accuracy at `eps` (`[0, 1]` convention).
    pub fn certified_at(&self, eps: f64) -> bool {
        self.is_correct() && self.radius_01 >= eps
    }
}

/// Certificate from estimation-round counts at noise level `sigma`.
pub fn certification_from_counts(
    id: u64,
    true_label: Option<usize>,
    candidate: usize,
    hits: u64,
    n: u64,
    sigma: f64,
    alpha_fail: f64,
) -> Result<CertificationResult> {
    let p_lower = clopper_pearson_lower(hits, n, alpha_fail)?;
    let certified = p_lower > 0.5;
    let radius_pm1 = if certified {
        certified_radius(sigma, p_lower)
    } else {
        0.0
    };
    Ok(CertificationResult {
        id,
        true_label,
        label: certified.then_some(candidate),
        candidate,
        hits,
        n,
        p_lower,
        radius_pm1,
        radius_01: radius_pm1 / 2.0,
    })
}

/// Two-stage certification: `n0` draws pick a candidate class, `n` fresh
/// draws count its hits. Radii use the achieved noise level.
pub fn certify(
    point: &Point,
    base: &BaseClassifier,
    params: &CertifyParams,
    master: u64,
) -> Result<CertificationResult> {
    check_params(params, base)?;
    let selection = base.tally(&point.x, params.n0, master, point.id, Purpose::Selection)?;
    let (candidate, _, _) = top_two(&selection);
    let estimation = base.tally(&point.x, params.n, master, point.id, Purpose::Estimation)?;
    certification_from_counts(
        point.id,
        point.true_label,
        candidate,
        estimation[candidate],
        params.n,
        base.solution().sigma_achieved,
        params.alpha_fail,
    )
}

/// [`certify`] for every point, in input order.
pub fn certify_dataset(
    points: &[Point],
    base: &BaseClassifier,
    params: &CertifyParams,
    master: u64,
) -> Result<Vec<CertificationResult>> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    points
        .par_iter()
        .map(|p| certify(p, base, params, master))
        .collect()
}

/// Fraction of results that are correct with `radius_01 ≥ eps`.
pub fn certified_accuracy(results: &[CertificationResult], eps: f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.certified_at(eps)).count() as f64 / results.len() as f64
}

/// Accuracy of the smoothed predictor itself (no radius requirement).
pub fn clean_accuracy(results: &[CertificationResult]) -> f64 {
    certified_accuracy(results, 0.0)
}

/// Run `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(Error::config("worker count must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Accuracy of `classifier ∘ denoiser` on one noisy draw per labeled point.
/// The injected noise depends on `(seed, point id)` only, so different
/// denoisers see identical noise.
pub fn denoised_accuracy(
    points: &[Point],
    sigma: f64,
    denoiser: &DenoiserSpec,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = BaseClassifier::new(sigma, denoiser, classifier, schedule)?;
    let correct = points
        .par_iter()
        .map(|p| {
            let truth = p
                .true_label
                .ok_or_else(|| Error::config(format!("point {} has no label", p.id)))?;
            check_dim(base.dim(), p.x.len())?;
            let mut rng = stream(seed, p.id, Purpose::Noise, 0);
            let mut noised = vec![0.0; p.x.len()];
            let mut denoised = vec![0.0; p.x.len()];
            Ok((base.sample_label(&p.x, &mut rng, &mut noised, &mut denoised) == truth) as u64)
        })
        .sum::<Result<u64>>()?;
    Ok(correct as f64 / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub denoiser: String,
    /// Internal (`[-1, 1]` convention) noise level.
    pub sigma: f64,
    /// Mean over seeds.
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
}

fn seed_average(
    points: &[Point],
    sigma: f64,
    denoiser: &DenoiserSpec,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<AccuracyCell> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let per_seed = seeds
        .iter()
        .map(|&s| denoised_accuracy(points, sigma, denoiser, classifier, schedule, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyCell {
        denoiser: denoiser.label(),
        sigma,
        accuracy: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        per_seed,
    })
}

/// Accuracy of every denoiser at every noise level, denoiser-major.
pub fn sampler_compare(
    points: &[Point],
    sigmas: &[f64],
    denoisers: &[DenoiserSpec],
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<AccuracyCell>> {
    let mut cells = Vec::with_capacity(sigmas.len() * denoisers.len());
    for spec in denoisers {
        for &sigma in sigmas {
            cells.push(seed_average(
                points, sigma, spec, classifier, schedule, seeds,
            )?);
        }
    }
    Ok(cells)
}

/// Accuracy of posterior-mean denoisers calibrated for each `sigma_train`
/// (rows) under each `sigma_eval` (columns).
pub fn mismatch_grid(
    points: &[Point],
    sigma_train: &[f64],
    sigma_eval: &[f64],
    model: &MixtureModel,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    sigma_train
        .iter()
        .map(|&train| {
            let spec = DenoiserSpec::Mismatched {
                model: model.clone(),
                sigma_train: train,
            };
            sigma_eval
                .iter()
                .map(|&eval| {
                    Ok(seed_average(points, eval, &spec, classifier, schedule, seeds)?.accuracy)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::MixtureClassifier;
    use crate::stats::gaussian_quantile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn xor() -> LabeledMixture {
        let model = MixtureModel::new(
            vec![0.35, 0.15, 0.15, 0.35],
            vec![
                vec![-0.5, -0.5],
                vec![-0.5, 0.5],
                vec![0.5, -0.5],
                vec![0.5, 0.5],
            ],
            0.15,
        )
        .unwrap();
        LabeledMixture::new(model, vec![0, 1, 1, 0], 2).unwrap()
    }

    fn params(sigma: f64, n0: u64, n: u64) -> CertifyParams {
        CertifyParams {
            sigma,
            n0,
            n,
            ..CertifyParams::default()
        }
    }

    #[test]
    fn points_must_lie_in_cube() {
        assert!(Point::new(0, vec![0.5, -1.0], None).is_ok());
        assert!(Point::new(0, vec![1.01], None).is_err());
        assert!(Point::new(0, vec![], None).is_err());
    }

    #[test]
    fn zero_noise_identity_reproduces_classifier() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm.clone());
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_dataset(&lm, 50, 4) {
            let got =
                noise_and_classify(&p, 0.0, &DenoiserSpec::Identity, &clf, &s, &mut rng).unwrap();
            assert_eq!(got, clf.classify(&p.x));
        }
    }

    #[test]
    fn fixed_seed_fixed_label() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm.clone());
        let s = NoiseSchedule::default();
        let spec = DenoiserSpec::OneShot {
            model: lm.model().clone(),
        };
        let p = Point::new(3, vec![0.1, -0.05], None).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| noise_and_classify(&p, 1.0, &spec, &clf, &s, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn top_two_breaks_ties_low() {
        assert_eq!(top_two(&[3, 5, 5, 1]), (1, 5, 5));
        assert_eq!(top_two(&[7]), (0, 7, 0));
        assert_eq!(top_two(&[0, 0]), (0, 0, 0));
    }

    #[test]
    fn predict_unanimous_and_single_vote() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm.clone());
        let s = NoiseSchedule::default();
        let base = BaseClassifier::new(0.0, &DenoiserSpec::Identity, &clf, &s).unwrap();
        let p = Point::new(0, vec![0.5, 0.5], Some(0)).unwrap();
        let out = predict(&p, &base, &params(0.0, 10, 100), 1).unwrap();
        assert_eq!(out.label, Some(0));
        assert_eq!(out.counts, vec![100, 0]);
        assert!((out.p_value - 2.0 * 0.5f64.powi(100)).abs() < 1e-40);
        let single = predict(&p, &base, &params(0.0, 1, 1), 1).unwrap();
        assert_eq!(single.label, None);
        assert_eq!(single.p_value, 1.0);
    }

    #[test]
    fn predict_rejects_wrong_sigma() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm);
        let s = NoiseSchedule::default();
        let base = BaseClassifier::new(0.5, &DenoiserSpec::Identity, &clf, &s).unwrap();
        let p = Point::new(0, vec![0.5, 0.5], None).unwrap();
        assert!(matches!(
            predict(&p, &base, &params(1.0, 10, 10), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn certificate_from_unanimous_counts() {
        let r = certification_from_counts(0, Some(1), 1, 1000, 1000, 0.25, 0.001).unwrap();
        let p = 0.001f64.powf(1.0 / 1000.0);
        assert!((r.p_lower - p).abs() < 1e-10);
        assert!((r.radius_pm1 - 0.25 * gaussian_quantile(p).unwrap()).abs() < 1e-9);
        assert_eq!(r.radius_01, r.radius_pm1 / 2.0);
        assert_eq!(r.label, Some(1));
        assert!(r.certified_at(0.3));
    }

    #[test]
    fn minority_counts_abstain() {
        let r = certification_from_counts(0, Some(0), 0, 400, 1000, 0.5, 0.001).unwrap();
        assert!(r.is_abstain());
        assert_eq!(r.radius_pm1, 0.0);
        assert!(!r.certified_at(0.0));
    }

    #[test]
    fn certify_is_worker_independent() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm.clone());
        let s = NoiseSchedule::default();
        let spec = DenoiserSpec::OneShot {
            model: lm.model().clone(),
        };
        let base = BaseClassifier::new(1.0, &spec, &clf, &s).unwrap();
        let pts = sample_dataset(&lm, 6, 2);
        let pr = params(1.0, 100, 3500);
        let one = with_workers(1, || certify_dataset(&pts, &base, &pr, 9).unwrap()).unwrap();
        let four = with_workers(4, || certify_dataset(&pts, &base, &pr, 9).unwrap()).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm);
        let s = NoiseSchedule::default();
        let base = BaseClassifier::new(0.5, &DenoiserSpec::Identity, &clf, &s).unwrap();
        assert!(matches!(
            certify_dataset(&[], &base, &params(0.5, 10, 10), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn accuracy_counts_only_correct_certificates() {
        let mk = |label, truth, r| CertificationResult {
            id: 0,
            true_label: truth,
            label,
            candidate: 0,
            hits: 0,
            n: 1,
            p_lower: 0.0,
            radius_pm1: 2.0 * r,
            radius_01: r,
        };
        let rs = vec![
            mk(Some(0), Some(0), 0.3),
            mk(Some(1), Some(0), 0.9),
            mk(None, Some(0), 0.0),
            mk(Some(2), Some(2), 0.1),
        ];
        assert_eq!(clean_accuracy(&rs), 0.5);
        assert_eq!(certified_accuracy(&rs, 0.2), 0.25);
        assert_eq!(certified_accuracy(&rs, 0.31), 0.0);
    }

    #[test]
    fn zero_noise_column_ties() {
        let lm = xor();
        let clf = MixtureClassifier::bayes(lm.clone());
        let s = NoiseSchedule::default();
        let pts = sample_dataset(&lm, 300, 1);
        let m = lm.model().clone();
        let specs = vec![
            DenoiserSpec::Identity,
            DenoiserSpec::OneShot { model: m.clone() },
            DenoiserSpec::Mismatched {
                model: m.clone(),
                sigma_train: 1.0,
            },
            DenoiserSpec::Ancestral { model: m.clone() },
            DenoiserSpec::Deterministic {
                model: m,
                steps: 18,
            },
        ];
        let cells = sampler_compare(&pts, &[0.0], &specs, &clf, &s, &[0, 1]).unwrap();
        let clean = pts
            .iter()
            .filter(|p| clf.classify(&p.x) == p.true_label.unwrap())
            .count() as f64
            / 300.0;
        for c in cells {
            assert_eq!(c.accuracy, clean, "{}", c.denoiser);
        }
    }
}
