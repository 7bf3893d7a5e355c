//! Label predictors applied to denoised points.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mixture::{sq_dist, MixtureModel};

/// A deterministic label predictor over `[-1, 1]^d`.
pub trait Classifier: Send + Sync {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Predict a class index. `x` must have length [`Classifier::dim`].
    fn classify(&self, x: &[f64]) -> usize;

    fn try_classify(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.dim(), x.len())?;
        Ok(self.classify(x))
    }
}

/// A mixture whose components carry class labels; several components may
/// share a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLabeled", into = "RawLabeled")]
pub struct LabeledMixture {
    model: MixtureModel,
    labels: Vec<usize>,
    num_classes: usize,
    members: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawLabeled {
    #[serde(flatten)]
    model: MixtureModel,
    labels: Vec<usize>,
    num_classes: usize,
}

impl TryFrom<RawLabeled> for LabeledMixture {
    type Error = Error;

    fn try_from(raw: RawLabeled) -> Result<Self> {
        LabeledMixture::new(raw.model, raw.labels, raw.num_classes)
    }
}

impl From<LabeledMixture> for RawLabeled {
    fn from(lm: LabeledMixture) -> Self {
        RawLabeled {
            model: lm.model,
            labels: lm.labels,
            num_classes: lm.num_classes,
        }
    }
}

impl LabeledMixture {
    pub fn new(model: MixtureModel, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != model.components() {
            return Err(Error::config(format!(
                "{} labels for {} mixture components",
                labels.len(),
                model.components()
            )));
        }
        let mut members = vec![Vec::new(); num_classes];
        for (k, &c) in labels.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::config(format!(
                    "label {c} outside [0, {num_classes})"
                )));
            }
            members[c].push(k);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::config(format!(
                "class {c} owns no mixture component"
            )));
        }
        let centroids = members
            .iter()
            .map(|ks| {
                let total: f64 = ks.iter().map(|&k| model.weights()[k]).sum();
                (0..model.dim())
                    .map(|i| {
                        ks.iter()
                            .map(|&k| model.weights()[k] * model.means()[k][i])
                            .sum::<f64>()
                            / total
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            labels,
            num_classes,
            members,
            centroids,
        })
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Class of mixture component `k`.
    pub fn label_of(&self, k: usize) -> usize {
        self.labels[k]
    }

    /// Weighted mean of each class's component means.
    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Unnormalized log posterior of class `c`:
    /// `log Σ_{k: label(k)=c} w_k N(x; μ_k, τ²I)` up to a shared constant.
    pub fn class_log_score(&self, x: &[f64], c: usize) -> f64 {
        let inv = 0.5 / (self.model.tau() * self.model.tau());
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &k in &self.members[c] {
            let v = self.model.log_weights()[k] - sq_dist(x, &self.model.means()[k]) * inv;
            if v > max {
                sum = sum * (max - v).exp() + 1.0;
                max = v;
            } else {
                sum += (v - max).exp();
            }
        }
        max + sum.ln()
    }

    fn bayes_unchecked(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.num_classes {
            let s = self.class_log_score(x, c);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    fn nearest_centroid_unchecked(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }

    #[cfg(test)]
    pub(crate) fn with_model(&self, model: MixtureModel) -> Self {
        Self {
            model,
            ..self.clone()
        }
    }
}

/// Bayes-optimal class under the mixture; ties go to the lowest class.
pub fn bayes_classify(lm: &LabeledMixture, x: &[f64]) -> Result<usize> {
    check_dim(lm.model.dim(), x.len())?;
    Ok(lm.bayes_unchecked(x))
}

/// Class with the nearest centroid; ties go to the lowest class.
pub fn nearest_centroid_classify(lm: &LabeledMixture, x: &[f64]) -> Result<usize> {
    check_dim(lm.model.dim(), x.len())?;
    Ok(lm.nearest_centroid_unchecked(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Bayes,
    NearestCentroid,
}

/// A classifier derived from a labeled mixture.
#[derive(Debug, Clone)]
pub struct MixtureClassifier {
    kind: ClassifierKind,
    mixture: LabeledMixture,
}

impl MixtureClassifier {
    pub fn new(kind: ClassifierKind, mixture: LabeledMixture) -> Self {
        Self { kind, mixture }
    }

    pub fn bayes(mixture: LabeledMixture) -> Self {
        Self::new(ClassifierKind::Bayes, mixture)
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn mixture(&self) -> &LabeledMixture {
        &self.mixture
    }
}

impl Classifier for MixtureClassifier {
    fn dim(&self) -> usize {
        self.mixture.model.dim()
    }

    fn num_classes(&self) -> usize {
        self.mixture.num_classes
    }

    fn classify(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim());
        match self.kind {
            ClassifierKind::Bayes => self.mixture.bayes_unchecked(x),
            ClassifierKind::NearestCentroid => self.mixture.nearest_centroid_unchecked(x),
        }
    }
}
