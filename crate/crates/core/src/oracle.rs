//! Exact smoothed-classifier probabilities for low-dimensional instances.
//!
//! `Pr[f(x + δ) = c]` is integrated as an iterated integral. The innermost
//! coordinate is integrated exactly: every label change along the line is
//! located and the Gaussian mass of each segment is summed. The outer
//! `d - 1` coordinates use either Gauss-Hermite nodes centred on `x`, or
//! composite Gauss-Legendre panels fixed in space whose line profiles are
//! cached in an [`Atlas`]. In two dimensions the panels are refined until the
//! crossing positions are polynomial across each panel, which resolves
//! corners and tangencies of the decision regions. Integration axes are a
//! fixed rotation of the input axes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classify::Classifier;
use crate::denoise::DenoiserSpec;
use crate::error::{check_dim, Error, Result};
use crate::pipeline::{BaseClassifier, Point};
use crate::schedule::NoiseSchedule;
use crate::stats::normal_cdf;

/// Half-width of the integration window in units of σ.
pub const WINDOW: f64 = 8.3;
/// Upper bound on the dimension handled by the oracle.
pub const MAX_DIM: usize = 3;
/// Lower bound on nodes per outer axis.
pub const MIN_NODES: usize = 32;

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];
/// Panel positions, relative to `[-1, 1]`, where the polynomial fit is checked.
const FIT_CHECKS: [f64; 4] = [-1.0, -0.4, 0.35, 1.0];
/// Widest base panel, in units of σ.
const MAX_PANEL: f64 = 2.0;
/// Smallest piece, in units of σ, that is still split.
const MIN_PANEL: f64 = 1e-7;
const MAX_PANEL_DEPTH: usize = 40;
/// Width, in units of σ, to which structure changes are localized.
const EVENT_TOL: f64 = 1e-11;
/// Allowed interpolation error of crossing positions, in units of σ.
const FIT_TOL: f64 = 1e-8;
const EVENT_CHECK: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureScheme {
    /// Gauss-Hermite nodes centred on the evaluation point.
    GaussHermite,
    /// Composite Gauss-Legendre panels on a fixed lattice.
    TensorGrid,
}

/// `nodes` is the node count per outer axis across the integration window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub scheme: QuadratureScheme,
    pub nodes: usize,
    pub dim: usize,
}

impl QuadratureGrid {
    pub fn new(scheme: QuadratureScheme, nodes: usize, dim: usize) -> Result<Self> {
        let grid = Self { scheme, nodes, dim };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < MIN_NODES {
            return Err(Error::config(format!(
                "quadrature needs at least {MIN_NODES} nodes per axis, got {}",
                self.nodes
            )));
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::Unsupported(format!(
                "oracle supports dimensions 1..={MAX_DIM}, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// The same scheme with twice the nodes per axis.
    pub fn refined(&self) -> Self {
        Self {
            nodes: self.nodes * 2,
            ..*self
        }
    }
}

/// Physicists' Gauss-Hermite rule, `∫ e^{-x²} g(x) dx ≈ Σ w_i g(x_i)`, from
/// the eigen-decomposition of the Jacobi matrix. Nodes ascend.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut e: Vec<f64> = (1..=n)
        .map(|k| if k < n { (k as f64 / 2.0).sqrt() } else { 0.0 })
        .collect();
    let mut z = vec![0.0; n];
    if n > 0 {
        z[0] = 1.0;
    }
    tridiagonal_eigen(&mut d, &mut e, &mut z);
    let mut pairs: Vec<(f64, f64)> = d
        .into_iter()
        .zip(z)
        .map(|(x, v)| (x, PI.sqrt() * v * v))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize away rounding.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Implicit QL on a symmetric tridiagonal matrix (`d` diagonal, `e[i]`
/// coupling `i` and `i + 1`). On return `d` holds eigenvalues and `z` the
/// first components of the matching eigenvectors.
fn tridiagonal_eigen(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        for _ in 0..200 {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Orthonormal frame of the integration: column `j` is the input-space
/// direction of integration axis `j`; the last column is the line direction.
#[derive(Debug, Clone)]
struct Frame {
    cols: Vec<Vec<f64>>,
}

impl Frame {
    fn new(dim: usize) -> Self {
        let mut q: Vec<Vec<f64>> = (0..dim)
            .map(|j| (0..dim).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let planes: &[(usize, usize, f64)] = &[(0, 1, 0.3), (1, 2, 0.7), (0, 2, 1.1)];
        for &(a, b, angle) in planes {
            if b >= dim {
                continue;
            }
            let (s, c) = angle.sin_cos();
            for col in q.iter_mut() {
                let (u, v) = (col[a], col[b]);
                col[a] = c * u - s * v;
                col[b] = s * u + c * v;
            }
        }
        Self { cols: q }
    }

    fn dim(&self) -> usize {
        self.cols.len()
    }

    fn to_frame(&self, x: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn line_dir(&self) -> &[f64] {
        &self.cols[self.dim() - 1]
    }

    /// Input-space point with the given outer coordinates and zero along the line.
    fn line_origin(&self, outer: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for (u, col) in outer.iter().zip(&self.cols) {
            for (zi, ci) in z.iter_mut().zip(col) {
                *zi += u * ci;
            }
        }
        z
    }
}

/// Labels along one integration line: `first` below the first crossing,
/// then each crossing's label until the next.
#[derive(Debug, Clone, PartialEq)]
struct LineProfile {
    first: usize,
    crossings: Vec<(f64, usize)>,
}

impl LineProfile {
    fn accumulate(&self, center: f64, sigma: f64, weight: f64, probs: &mut [f64]) {
        let mut label = self.first;
        let mut prev = 0.0;
        for &(t, next) in &self.crossings {
            let cdf = normal_cdf((t - center) / sigma);
            probs[label] += weight * (cdf - prev);
            prev = cdf;
            label = next;
        }
        probs[label] += weight * (1.0 - prev);
    }

    fn same_structure(&self, other: &LineProfile) -> bool {
        self.first == other.first
            && self.crossings.len() == other.crossings.len()
            && self
                .crossings
                .iter()
                .zip(&other.crossings)
                .all(|(a, b)| a.1 == b.1)
    }
}

/// Lagrange interpolation through the panel's Gauss-Legendre nodes.
fn interpolate(values: &[f64; 8], s: f64) -> f64 {
    let mut acc = 0.0;
    for (i, (xi, vi)) in GL_NODES.iter().zip(values).enumerate() {
        let mut l = 1.0;
        for (j, xj) in GL_NODES.iter().enumerate() {
            if i != j {
                l *= (s - xj) / (xi - xj);
            }
        }
        acc += l * vi;
    }
    acc
}

/// Exact evaluator of the smoothed classifier built on a deterministic
/// base classifier.
#[derive(Clone)]
pub struct Oracle<'a> {
    base: BaseClassifier<'a>,
    grid: QuadratureGrid,
    frame: Frame,
    sigma: f64,
}

impl<'a> Oracle<'a> {
    pub fn new(
        sigma: f64,
        denoiser: &DenoiserSpec,
        classifier: &'a dyn Classifier,
        schedule: &NoiseSchedule,
        grid: QuadratureGrid,
    ) -> Result<Self> {
        let base = BaseClassifier::new(sigma, denoiser, classifier, schedule)?;
        Self::from_base(base, grid)
    }

    pub fn from_base(base: BaseClassifier<'a>, grid: QuadratureGrid) -> Result<Self> {
        grid.validate()?;
        check_dim(grid.dim, base.dim())?;
        if !base.is_deterministic() {
            return Err(Error::Unsupported(
                "stochastic denoisers have no pointwise decision function".into(),
            ));
        }
        let sigma = base.solution().sigma_achieved;
        Ok(Self {
            frame: Frame::new(grid.dim),
            base,
            grid,
            sigma,
        })
    }

    /// Noise level actually integrated over.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    /// The undisturbed decision `classifier(denoise(z))`.
    pub fn decision(&self, z: &[f64]) -> usize {
        let mut buf = vec![0.0; z.len()];
        self.base
            .decide(z, &mut buf, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// The same oracle with twice the nodes per axis.
    pub fn refined(&self) -> Oracle<'a> {
        Oracle {
            grid: self.grid.refined(),
            ..self.clone()
        }
    }

    fn scan_step(&self) -> f64 {
        (self.sigma / 32.0).min(1.0 / 64.0)
    }

    fn scan_line(&self, outer: &[f64], t_lo: f64, t_hi: f64) -> LineProfile {
        let origin = self.frame.line_origin(outer);
        let dir = self.frame.line_dir();
        let mut z = vec![0.0; origin.len()];
        let mut buf = vec![0.0; origin.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut label_at = |t: f64| {
            for ((zi, o), d) in z.iter_mut().zip(&origin).zip(dir) {
                *zi = o + t * d;
            }
            self.base.decide(&z, &mut buf, &mut rng)
        };
        let steps = ((t_hi - t_lo) / self.scan_step()).ceil().max(1.0) as usize;
        let h = (t_hi - t_lo) / steps as f64;
        let first = label_at(t_lo);
        let mut crossings = Vec::new();
        let (mut a, mut la) = (t_lo, first);
        for i in 1..=steps {
            let b = if i == steps {
                t_hi
            } else {
                t_lo + i as f64 * h
            };
            let lb = label_at(b);
            if lb != la {
                refine(&mut label_at, a, la, b, lb, &mut crossings);
            }
            a = b;
            la = lb;
        }
        LineProfile { first, crossings }
    }

    /// Class probabilities of the smoothed classifier at `x`.
    pub fn class_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.grid.dim, x.len())?;
        if self.sigma == 0.0 {
            let mut p = vec![0.0; self.num_classes()];
            p[self.decision(x)] = 1.0;
            return Ok(p);
        }
        match self.grid.scheme {
            QuadratureScheme::TensorGrid => self.atlas(x, 0.0)?.probabilities(x),
            QuadratureScheme::GaussHermite => Ok(self.gauss_hermite_probabilities(x)),
        }
    }

    fn gauss_hermite_probabilities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.grid.dim;
        let u = self.frame.to_frame(x);
        let (nodes, weights) = gauss_hermite(self.grid.nodes);
        let scale = std::f64::consts::SQRT_2 * self.sigma;
        let norm = PI.sqrt();
        let axes: Vec<Vec<(f64, f64)>> = (0..d - 1)
            .map(|j| {
                nodes
                    .iter()
                    .zip(&weights)
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(n, w)| (u[j] + scale * n, w / norm))
                    .collect()
            })
            .collect();
        let center = u[d - 1];
        let span = WINDOW * self.sigma;
        let mut probs = vec![0.0; self.num_classes()];
        for_each_product(&axes, |outer, weight| {
            let profile = self.scan_line(outer, center - span, center + span);
            profile.accumulate(center, self.sigma, weight, &mut probs);
        });
        probs
    }

    /// Argmax of [`Oracle::class_probabilities`], lowest index on ties.
    pub fn smoothed_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.class_probabilities(x)?))
    }

    /// Base panel width: the node budget spread over the window, but never
    /// wider than `MAX_PANEL` so the Gaussian weight itself stays resolved.
    fn panel_width(&self) -> f64 {
        let spread = 2.0 * WINDOW * GL_NODES.len() as f64 / self.grid.nodes as f64;
        spread.min(MAX_PANEL) * self.sigma
    }

    /// Adaptive nodes over the base panel `[a, b]` of a two-dimensional
    /// instance. Points where the label structure of the lines changes are
    /// located by bisection and become piece boundaries; pieces ending at
    /// such a point use a quadratic substitution that smooths the
    /// square-root behaviour of tangencies.
    fn adaptive_axis(
        &self,
        a: f64,
        b: f64,
        t_lo: f64,
        t_hi: f64,
        out: &mut Vec<(f64, f64, LineProfile)>,
    ) {
        const SAMPLES: usize = 8;
        let samples: Vec<(f64, LineProfile)> = (0..=SAMPLES)
            .map(|i| {
                let u = if i == SAMPLES {
                    b
                } else {
                    a + (b - a) * i as f64 / SAMPLES as f64
                };
                (u, self.scan_line(&[u], t_lo, t_hi))
            })
            .collect();
        let mut breaks = vec![(a, false)];
        for pair in samples.windows(2) {
            let ((l, pl), (r, pr)) = (&pair[0], &pair[1]);
            if !pl.same_structure(pr) {
                self.locate_events(*l, pl, *r, pr, t_lo, t_hi, &mut breaks);
            }
        }
        breaks.push((b, false));
        for pair in breaks.windows(2) {
            let ((l, le), (r, re)) = (pair[0], pair[1]);
            if r > l {
                self.integrate_piece(l, le, r, re, t_lo, t_hi, 0, out);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn locate_events(
        &self,
        l: f64,
        pl: &LineProfile,
        r: f64,
        pr: &LineProfile,
        t_lo: f64,
        t_hi: f64,
        out: &mut Vec<(f64, bool)>,
    ) {
        if r - l <= EVENT_TOL * self.sigma.max(1e-3) {
            out.push((0.5 * (l + r), true));
            return;
        }
        let m = 0.5 * (l + r);
        let pm = self.scan_line(&[m], t_lo, t_hi);
        if !pl.same_structure(&pm) {
            self.locate_events(l, pl, m, &pm, t_lo, t_hi, out);
        }
        if !pm.same_structure(pr) {
            self.locate_events(m, &pm, r, pr, t_lo, t_hi, out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_piece(
        &self,
        l: f64,
        l_event: bool,
        r: f64,
        r_event: bool,
        t_lo: f64,
        t_hi: f64,
        depth: usize,
        out: &mut Vec<(f64, f64, LineProfile)>,
    ) {
        if l_event && r_event {
            let m = 0.5 * (l + r);
            self.integrate_piece(l, true, m, false, t_lo, t_hi, depth, out);
            self.integrate_piece(m, false, r, true, t_lo, t_hi, depth, out);
            return;
        }
        let len = r - l;
        // s ∈ [-1, 1] ↦ (u, du/ds).
        let map = |s: f64| -> (f64, f64) {
            let q = 0.5 * (s + 1.0);
            if l_event {
                (l + len * q * q, len * q)
            } else if r_event {
                (r - len * (1.0 - q) * (1.0 - q), len * (1.0 - q))
            } else {
                (l + len * q, 0.5 * len)
            }
        };
        let nodes: Vec<(f64, f64, LineProfile)> = GL_NODES
            .iter()
            .zip(GL_WEIGHTS)
            .map(|(&s, w)| {
                let (u, jac) = map(s);
                (u, w * jac, self.scan_line(&[u], t_lo, t_hi))
            })
            .collect();
        // An event end is only known to within its bracket, so it is not checked directly.
        let mut checks = FIT_CHECKS;
        if l_event {
            checks[0] = -EVENT_CHECK;
        }
        if r_event {
            checks[3] = EVENT_CHECK;
        }
        let smooth = self.piece_is_smooth(&nodes, &checks, |s| map(s).0, t_lo, t_hi);
        if smooth || depth >= MAX_PANEL_DEPTH || len <= MIN_PANEL * self.sigma {
            out.extend(nodes);
            return;
        }
        let m = 0.5 * (l + r);
        self.integrate_piece(l, l_event, m, false, t_lo, t_hi, depth + 1, out);
        self.integrate_piece(m, false, r, r_event, t_lo, t_hi, depth + 1, out);
    }

    /// Whether every line of the piece shares one label structure and the
    /// crossing positions are reproduced by the interpolating polynomial.
    fn piece_is_smooth<M: Fn(f64) -> f64>(
        &self,
        nodes: &[(f64, f64, LineProfile)],
        checks: &[f64; 4],
        map: M,
        t_lo: f64,
        t_hi: f64,
    ) -> bool {
        let reference = &nodes[0].2;
        if nodes.iter().any(|(_, _, p)| !reference.same_structure(p)) {
            return false;
        }
        let tol = (FIT_TOL * self.sigma).max(1e-12);
        for &s in checks {
            let check = self.scan_line(&[map(s)], t_lo, t_hi);
            if !reference.same_structure(&check) {
                return false;
            }
            for (i, &(t, _)) in check.crossings.iter().enumerate() {
                let mut values = [0.0; 8];
                for (v, (_, _, p)) in values.iter_mut().zip(nodes) {
                    *v = p.crossings[i].0;
                }
                if (interpolate(&values, s) - t).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Cache line profiles so that probabilities anywhere in the ball
    /// `‖x − center‖ ≤ radius` cost only Gaussian masses.
    pub fn atlas(&self, center: &[f64], radius: f64) -> Result<Atlas> {
        check_dim(self.grid.dim, center.len())?;
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::domain(format!(
                "atlas radius must be finite and nonnegative, got {radius}"
            )));
        }
        if self.sigma == 0.0 {
            return Err(Error::Unsupported("atlas needs positive noise".into()));
        }
        let d = self.grid.dim;
        let c = self.frame.to_frame(center);
        let reach = radius + WINDOW * self.sigma;
        let (t_lo, t_hi) = (c[d - 1] - reach, c[d - 1] + reach);
        let width = self.panel_width();
        let mut axes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d - 1);
        let mut lines = Vec::new();
        for &cj in &c[..d - 1] {
            // Panels sit on a lattice anchored at the origin.
            let first = ((cj - reach) / width).floor() as i64;
            let last = ((cj + reach) / width).ceil() as i64;
            let mut axis = Vec::new();
            for k in first..last {
                let (a, b) = (k as f64 * width, (k + 1) as f64 * width);
                if d == 2 {
                    let mut nodes = Vec::new();
                    self.adaptive_axis(a, b, t_lo, t_hi, &mut nodes);
                    for (u, w, p) in nodes {
                        axis.push((u, w));
                        lines.push(p);
                    }
                } else {
                    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
                    axis.extend(
                        GL_NODES
                            .iter()
                            .zip(GL_WEIGHTS)
                            .map(|(s, w)| (mid + half * s, half * w)),
                    );
                }
            }
            axes.push(axis);
        }
        if d != 2 {
            let mut fill = Vec::new();
            for_each_product(&axes, |outer, _| {
                fill.push(self.scan_line(outer, t_lo, t_hi))
            });
            lines = fill;
        }
        Ok(Atlas {
            sigma: self.sigma,
            frame: self.frame.clone(),
            center: center.to_vec(),
            radius,
            axes,
            lines,
            classes: self.num_classes(),
        })
    }
}

fn refine<F: FnMut(f64) -> usize>(
    label_at: &mut F,
    a: f64,
    la: usize,
    b: f64,
    lb: usize,
    out: &mut Vec<(f64, usize)>,
) {
    let tol = 1e-13 * a.abs().max(b.abs()).max(1.0);
    if b - a <= tol {
        out.push((0.5 * (a + b), lb));
        return;
    }
    let m = 0.5 * (a + b);
    let lm = label_at(m);
    if lm != la {
        refine(label_at, a, la, m, lm, out);
    }
    if lm != lb {
        refine(label_at, m, lm, b, lb, out);
    }
}

/// Visit the tensor product of per-axis `(coordinate, weight)` lists.
fn for_each_product<F: FnMut(&[f64], f64)>(axes: &[Vec<(f64, f64)>], mut f: F) {
    if axes.iter().any(Vec::is_empty) {
        return;
    }
    let mut idx = vec![0usize; axes.len()];
    let mut point = vec![0.0; axes.len()];
    loop {
        let mut w = 1.0;
        for (j, &i) in idx.iter().enumerate() {
            point[j] = axes[j][i].0;
            w *= axes[j][i].1;
        }
        f(&point, w);
        let mut j = axes.len();
        loop {
            if j == 0 {
                return;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Cached line profiles over a ball of centres; see [`Oracle::atlas`].
#[derive(Debug, Clone)]
pub struct Atlas {
    sigma: f64,
    frame: Frame,
    center: Vec<f64>,
    radius: f64,
    /// Sorted `(coordinate, weight)` nodes per outer axis.
    axes: Vec<Vec<(f64, f64)>>,
    /// Profiles in row-major order over the axes.
    lines: Vec<LineProfile>,
    classes: usize,
}

impl Atlas {
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lines(&self) -> usize {
        self.lines.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let dist = x
            .iter()
            .zip(&self.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x.len() == self.center.len() && dist <= self.radius * (1.0 + 1e-12) + 1e-12
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.center.len(), x.len())?;
        if !self.contains(x) {
            return Err(Error::domain("point lies outside the atlas"));
        }
        let d = self.center.len();
        let u = self.frame.to_frame(x);
        let span = WINDOW * self.sigma;
        let norm = 1.0 / (self.sigma * (2.0 * PI).sqrt());
        // Per axis: (index offset, weight) of nodes inside the window.
        let ranges: Vec<(usize, usize)> = self
            .axes
            .iter()
            .zip(&u)
            .map(|(axis, &uj)| {
                let lo = axis.partition_point(|n| n.0 < uj - span);
                let hi = axis.partition_point(|n| n.0 <= uj + span);
                (lo, hi)
            })
            .collect();
        let local: Vec<Vec<(f64, f64)>> = ranges
            .iter()
            .zip(&self.axes)
            .zip(&u)
            .map(|((&(lo, hi), axis), &uj)| {
                (lo..hi)
                    .map(|i| {
                        let r = (axis[i].0 - uj) / self.sigma;
                        (i as f64, axis[i].1 * norm * (-0.5 * r * r).exp())
                    })
                    .collect()
            })
            .collect();
        let mut probs = vec![0.0; self.classes];
        let center = u[d - 1];
        for_each_product(&local, |indices, weight| {
            let mut flat = 0usize;
            for (j, &i) in indices.iter().enumerate() {
                flat = flat * self.axes[j].len() + i as usize;
            }
            self.lines[flat].accumulate(center, self.sigma, weight, &mut probs);
        });
        Ok(probs)
    }
}

/// Class probabilities of the smoothed classifier at `point`.
pub fn exact_class_probabilities(
    point: &Point,
    sigma: f64,
    denoiser: &DenoiserSpec,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    grid: QuadratureGrid,
) -> Result<Vec<f64>> {
    Oracle::new(sigma, denoiser, classifier, schedule, grid)?.class_probabilities(&point.x)
}

/// Label of the smoothed classifier at `point`, lowest index on ties.
pub fn exact_smoothed_label(
    point: &Point,
    sigma: f64,
    denoiser: &DenoiserSpec,
    classifier: &dyn Classifier,
    schedule: &NoiseSchedule,
    grid: QuadratureGrid,
) -> Result<usize> {
    Ok(argmax(&exact_class_probabilities(
        point, sigma, denoiser, classifier, schedule, grid,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub directions: usize,
    pub ascent_steps: usize,
    /// Ascent step as a fraction of the radius.
    pub step_fraction: f64,
    /// A rival class must beat the original label by more than this.
    pub tolerance: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            directions: 10_000,
            ascent_steps: 100,
            step_fraction: 1.0 / 50.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub delta: Vec<f64>,
    pub label: usize,
    pub p_label: f64,
    pub p_original: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub radius: f64,
    pub label: usize,
    pub evaluations: usize,
    /// Smallest `p_label − max_rival` seen; negative when a rival won.
    pub min_margin: f64,
    pub violations: Vec<Violation>,
}

impl SoundnessReport {
    pub fn is_sound(&self) -> bool {
        self.violations.is_empty()
    }
}

fn margin(p: &[f64], label: usize) -> (f64, usize) {
    let mut rival = if label == 0 { 1.min(p.len() - 1) } else { 0 };
    for (i, v) in p.iter().enumerate() {
        if i != label && *v > p[rival] {
            rival = i;
        }
    }
    if rival == label {
        return (f64::INFINITY, label);
    }
    (p[label] - p[rival], rival)
}

/// Look for `δ` with `‖δ‖ ≤ radius` at which a rival class beats `label`:
/// random directions on the sphere, then projected coordinate descent on
/// the margin from the weakest direction. Stops at the first violation.
pub fn soundness_search<F, R>(
    x: &[f64],
    radius: f64,
    label: usize,
    mut probs: F,
    budget: &SearchBudget,
    rng: &mut R,
) -> Result<SoundnessReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let mut report = SoundnessReport {
        radius,
        label,
        evaluations: 0,
        min_margin: f64::INFINITY,
        violations: Vec::new(),
    };
    if !(radius > 0.0) {
        return Ok(report);
    }
    let d = x.len();
    let mut z = vec![0.0; d];
    let mut evaluate = |delta: &[f64], report: &mut SoundnessReport| -> Result<f64> {
        for ((zi, xi), di) in z.iter_mut().zip(x).zip(delta) {
            *zi = xi + di;
        }
        let p = probs(&z)?;
        report.evaluations += 1;
        let (m, rival) = margin(&p, label);
        report.min_margin = report.min_margin.min(m);
        if -m > budget.tolerance {
            report.violations.push(Violation {
                delta: delta.to_vec(),
                label: rival,
                p_label: p[rival],
                p_original: p[label],
            });
        }
        Ok(m)
    };

    let mut best = (f64::INFINITY, vec![0.0; d]);
    for _ in 0..budget.directions {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        u.iter_mut().for_each(|v| *v *= radius / norm);
        let m = evaluate(&u, &mut report)?;
        if !report.is_sound() {
            return Ok(report);
        }
        if m < best.0 {
            best = (m, u);
        }
    }

    let step = radius * budget.step_fraction;
    let (mut current_margin, mut delta) = best;
    if !current_margin.is_finite() {
        return Ok(report);
    }
    for _ in 0..budget.ascent_steps {
        let mut best_move: Option<(f64, Vec<f64>)> = None;
        for i in 0..d {
            for sign in [-1.0, 1.0] {
                let mut cand = delta.clone();
                cand[i] += sign * step;
                let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    cand.iter_mut().for_each(|v| *v *= radius / norm);
                }
                let m = evaluate(&cand, &mut report)?;
                if !report.is_sound() {
                    return Ok(report);
                }
                if best_move.as_ref().is_none_or(|(bm, _)| m < *bm) {
                    best_move = Some((m, cand));
                }
            }
        }
        match best_move {
            Some((m, cand)) if m < current_margin => {
                current_margin = m;
                delta = cand;
            }
            _ => break,
        }
    }
    Ok(report)
}

/// Point on the segment from `inside` to `outside` where the probability of
/// `label` equals `target`, found by bisection. `None` unless the endpoint
/// probabilities bracket the target.
pub fn boundary_point<F>(
    inside: &[f64],
    outside: &[f64],
    label: usize,
    target: f64,
    mut probs: F,
) -> Result<Option<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let at = |s: f64| -> Vec<f64> {
        inside
            .iter()
            .zip(outside)
            .map(|(a, b)| a + s * (b - a))
            .collect()
    };
    let p_in = probs(inside)?[label];
    let p_out = probs(outside)?[label];
    if !(p_in > target && p_out < target) {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if probs(&at(mid))?[label] > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(at(lo)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{LabeledMixture, MixtureClassifier};
    use crate::mixture::MixtureModel;

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        for n in [1, 2, 5, 32, 64] {
            let (x, w) = gauss_hermite(n);
            assert!(x.windows(2).all(|p| p[0] < p[1]));
            // ∫ e^{-x²} x^{2k} dx = Γ(k + ½).
            let mut gamma = PI.sqrt();
            for k in 0..n.min(8) {
                let q: f64 = x
                    .iter()
                    .zip(&w)
                    .map(|(x, w)| w * x.powi(2 * k as i32))
                    .sum();
                assert!(
                    (q - gamma).abs() < 1e-12 * gamma,
                    "n={n} k={k}: {q} vs {gamma}"
                );
                let odd: f64 = x
                    .iter()
                    .zip(&w)
                    .map(|(x, w)| w * x.powi(2 * k as i32 + 1))
                    .sum();
                assert!(odd.abs() < 1e-10 * gamma.max(1.0));
                gamma *= k as f64 + 0.5;
            }
        }
    }

    #[test]
    fn frame_is_orthonormal() {
        for d in 1..=3 {
            let f = Frame::new(d);
            for i in 0..d {
                for j in 0..d {
                    let dot: f64 = f.cols[i].iter().zip(&f.cols[j]).map(|(a, b)| a * b).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(QuadratureGrid::new(QuadratureScheme::GaussHermite, 31, 2).is_err());
        assert!(matches!(
            QuadratureGrid::new(QuadratureScheme::TensorGrid, 64, 4),
            Err(Error::Unsupported(_))
        ));
        assert!(QuadratureGrid::new(QuadratureScheme::TensorGrid, 32, 3).is_ok());
    }

    #[test]
    fn product_visits_every_combination() {
        let axes = vec![
            vec![(1.0, 0.5), (2.0, 0.5)],
            vec![(3.0, 0.25), (4.0, 0.75), (5.0, 0.0)],
        ];
        let mut seen = Vec::new();
        for_each_product(&axes, |p, w| seen.push((p.to_vec(), w)));
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], (vec![1.0, 3.0], 0.125));
        assert_eq!(seen[5], (vec![2.0, 5.0], 0.0));
        let mut count = 0;
        for_each_product(&[], |_, w| {
            assert_eq!(w, 1.0);
            count += 1;
        });
        assert_eq!(count, 1);
    }

    #[test]
    fn margin_handles_single_class() {
        assert_eq!(margin(&[1.0], 0).0, f64::INFINITY);
        assert_eq!(margin(&[0.2, 0.5, 0.3], 1), (0.2, 2));
        assert_eq!(margin(&[0.2, 0.5, 0.3], 0), (-0.3, 1));
    }

    #[test]
    fn ancestral_is_unsupported() {
        let m = MixtureModel::new(vec![0.5, 0.5], vec![vec![-0.5], vec![0.5]], 0.2).unwrap();
        let lm = LabeledMixture::new(m.clone(), vec![0, 1], 2).unwrap();
        let clf = MixtureClassifier::bayes(lm);
        let grid = QuadratureGrid::new(QuadratureScheme::GaussHermite, 32, 1).unwrap();
        let res = Oracle::new(
            0.5,
            &DenoiserSpec::Ancestral { model: m },
            &clf,
            &NoiseSchedule::default(),
            grid,
        );
        assert!(matches!(res, Err(Error::Unsupported(_))));
    }
}
