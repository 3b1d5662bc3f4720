//! Unsupervised per-layer probes on pair-mode dumps and a linear SVM
//! baseline on hidden states.
//!
//! A probe is the top principal direction of a layer's (centered) last-token
//! embeddings plus one learned bit: whether the correct choice of a question
//! is the one with the largest or the smallest projection.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, PowerIteration};
use crate::store::{ActivationDump, DumpMode, Group};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignRule {
    Argmin,
    Argmax,
}

impl SignRule {
    /// Picks among projections; ties go to the lowest index.
    pub fn select(self, projections: &[f64]) -> usize {
        let mut best = 0;
        for (i, &p) in projections.iter().enumerate().skip(1) {
            let better = match self {
                SignRule::Argmax => p > projections[best],
                SignRule::Argmin => p < projections[best],
            };
            if better {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDirection {
    pub layer: usize,
    pub direction: Vec<f64>,
    pub sign: SignRule,
    pub train_accuracy: f64,
}

impl ProbeDirection {
    /// Wraps an arbitrary direction (normalized here) as a probe.
    pub fn from_direction(layer: usize, direction: Vec<f64>, sign: SignRule) -> Result<Self> {
        let n = linalg::norm(&direction);
        if !(n.is_finite() && n > 0.0) {
            return Err(arg("probe direction must be finite and non-zero"));
        }
        Ok(Self {
            layer,
            direction: direction.into_iter().map(|x| x / n).collect(),
            sign,
            train_accuracy: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProbeOptions {
    pub power: PowerIteration,
    /// Run PCA on each row's offset from its question mean instead of on the
    /// globally centered rows.
    pub stimulus_differencing: bool,
}


fn require_pair(dump: &ActivationDump, what: &str) -> Result<Vec<Group>> {
    if dump.mode != DumpMode::Pair {
        return Err(arg(format!("{what} requires a pair-mode dump")));
    }
    Ok(dump.groups())
}

fn projections(dump: &ActivationDump, layer: usize, rows: &[usize], v: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|&r| {
            dump.vector(r, layer)
                .iter()
                .zip(v)
                .map(|(&x, &w)| x as f64 * w)
                .sum()
        })
        .collect()
}

/// Per-question chosen row index (into the group) under a direction and rule.
pub fn choose_answers(dump: &ActivationDump, layer: usize, direction: &[f64], sign: SignRule) -> Result<Vec<(String, usize)>> {
    let groups = require_pair(dump, "answer selection")?;
    if direction.len() != dump.hidden_size {
        return Err(arg(format!(
            "probe dimension {} != dump hidden_size {}",
            direction.len(),
            dump.hidden_size
        )));
    }
    if layer >= dump.n_layers {
        return Err(arg(format!("layer {layer} >= n_layers {}", dump.n_layers)));
    }
    Ok(groups
        .iter()
        .map(|g| (g.id.clone(), sign.select(&projections(dump, layer, &g.rows, direction))))
        .collect())
}

fn accuracy_of(dump: &ActivationDump, layer: usize, direction: &[f64], sign: SignRule) -> Result<f64> {
    let groups = dump.groups();
    let answers = choose_answers(dump, layer, direction, sign)?;
    if answers.is_empty() {
        return Err(arg("dump has no questions"));
    }
    let hits = groups
        .iter()
        .zip(&answers)
        .filter(|(g, (_, pick))| dump.labels[g.rows[*pick]] == 1)
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Train accuracy of both sign rules for a direction, `(argmin, argmax)`.
pub fn sign_accuracies(dump: &ActivationDump, layer: usize, direction: &[f64]) -> Result<(f64, f64)> {
    Ok((
        accuracy_of(dump, layer, direction, SignRule::Argmin)?,
        accuracy_of(dump, layer, direction, SignRule::Argmax)?,
    ))
}

pub fn fit_probe(train: &ActivationDump, layer: usize) -> Result<ProbeDirection> {
    fit_probe_with(train, layer, &ProbeOptions::default())
}

pub fn fit_probe_with(train: &ActivationDump, layer: usize, opts: &ProbeOptions) -> Result<ProbeDirection> {
    let groups = require_pair(train, "fit_probe")?;
    if layer >= train.n_layers {
        return Err(arg(format!("layer {layer} >= n_layers {}", train.n_layers)));
    }
    if groups.len() < 2 {
        return Err(arg(format!("need at least 2 questions, got {}", groups.len())));
    }

    let mut x = linalg::rows_to_array(&train.layer_rows(layer));
    if opts.stimulus_differencing {
        for g in &groups {
            let mut mean = Array1::<f64>::zeros(train.hidden_size);
            for &r in &g.rows {
                mean += &x.row(r);
            }
            mean /= g.rows.len() as f64;
            for &r in &g.rows {
                let mut row = x.row_mut(r);
                row -= &mean;
            }
        }
    }
    let pc = linalg::principal_components(&x, 1, &opts.power)?.remove(0);
    let direction = pc.direction.to_vec();

    let (acc_min, acc_max) = sign_accuracies(train, layer, &direction)?;
    let (sign, train_accuracy) = if acc_min > acc_max {
        (SignRule::Argmin, acc_min)
    } else {
        (SignRule::Argmax, acc_max)
    };
    Ok(ProbeDirection {
        layer,
        direction,
        sign,
        train_accuracy,
    })
}

pub fn eval_probe(probe: &ProbeDirection, test: &ActivationDump) -> Result<f64> {
    accuracy_of(test, probe.layer, &probe.direction, probe.sign)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    /// Test accuracy per layer; `None` where the probe could not be fit.
    pub accuracies: Vec<Option<f64>>,
    pub cognitive_score: f64,
    pub best_layer: usize,
    pub probes: Vec<Option<ProbeDirection>>,
    /// Error text for layers without an accuracy.
    pub failures: Vec<Option<String>>,
}

impl LayerCurve {
    /// Builds a curve from per-layer accuracies; the score is their maximum.
    pub fn from_accuracies(accuracies: Vec<Option<f64>>) -> Result<Self> {
        let (best_layer, cognitive_score) = accuracies
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i, a)))
            .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((i, a)),
            })
            .ok_or_else(|| Error::Degenerate("no layer produced a probe".into()))?;
        let n = accuracies.len();
        Ok(Self {
            accuracies,
            cognitive_score,
            best_layer,
            probes: vec![None; n],
            failures: vec![None; n],
        })
    }

    /// Accuracies with missing layers as NaN.
    pub fn dense(&self) -> Vec<f64> {
        self.accuracies.iter().map(|a| a.unwrap_or(f64::NAN)).collect()
    }
}

pub fn layer_curve(train: &ActivationDump, test: &ActivationDump) -> Result<LayerCurve> {
    layer_curve_with(train, test, &ProbeOptions::default(), Exec::default())
}

/// Fits and evaluates one probe per layer; layers fit independently under
/// `exec`.
pub fn layer_curve_with(train: &ActivationDump, test: &ActivationDump, opts: &ProbeOptions, exec: Exec) -> Result<LayerCurve> {
    if train.n_layers != test.n_layers || train.hidden_size != test.hidden_size {
        return Err(arg(format!(
            "train dump is {}x{}, test dump is {}x{} (layers x hidden)",
            train.n_layers, train.hidden_size, test.n_layers, test.hidden_size
        )));
    }
    require_pair(test, "layer_curve")?;
    let results = exec.map(train.n_layers, |layer| {
        let probe = fit_probe_with(train, layer, opts)?;
        let acc = eval_probe(&probe, test)?;
        Ok::<_, Error>((probe, acc))
    });

    let mut accuracies = Vec::with_capacity(results.len());
    let mut probes = Vec::with_capacity(results.len());
    let mut failures = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok((p, a)) => {
                accuracies.push(Some(a));
                probes.push(Some(p));
                failures.push(None);
            }
            Err(e @ Error::Argument(_)) => return Err(e),
            Err(e) => {
                accuracies.push(None);
                probes.push(None);
                failures.push(Some(e.to_string()));
            }
        }
    }
    let mut curve = LayerCurve::from_accuracies(accuracies)
        .map_err(|_| Error::Degenerate("probe failed on every layer".into()))?;
    curve.probes = probes;
    curve.failures = failures;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSeparator {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearSeparator {
    pub fn decision(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.weight, x) + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 50,
            seed: 0,
        }
    }
}

/// A fitted separator with the regularized hinge objective after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub separator: LinearSeparator,
    pub objective: Vec<f64>,
}

/// `λ/2·‖(w, b)‖² + mean hinge loss` with labels in {−1, +1}.
pub fn svm_objective(x: &Array2<f64>, y: &[f64], w: &Array1<f64>, b: f64, lambda: f64) -> f64 {
    let scores = x.dot(w);
    let hinge: f64 = scores
        .iter()
        .zip(y)
        .map(|(s, y)| (1.0 - y * (s + b)).max(0.0))
        .sum::<f64>()
        / y.len() as f64;
    0.5 * lambda * (w.dot(w) + b * b) + hinge
}

pub fn fit_linear_svm(embeddings: &[Vec<f64>], labels: &[bool], lambda: f64) -> Result<LinearSeparator> {
    Ok(fit_linear_svm_with(embeddings, labels, &SvmOptions { lambda, ..SvmOptions::default() })?.separator)
}

/// Stochastic subgradient descent on the regularized hinge loss with step
/// `1/(λt)`, a seeded per-epoch permutation, projection onto the ball of
/// radius `1/√λ`, and the bias folded in as a constant feature. The
/// returned separator is the epoch-end iterate with the lowest objective.
pub fn fit_linear_svm_with(embeddings: &[Vec<f64>], labels: &[bool], opts: &SvmOptions) -> Result<SvmFit> {
    if embeddings.len() != labels.len() {
        return Err(arg(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if !(opts.lambda > 0.0 && opts.lambda.is_finite()) {
        return Err(arg(format!("lambda must be positive, got {}", opts.lambda)));
    }
    if opts.epochs == 0 {
        return Err(arg("epochs must be at least 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(arg("linear SVM needs both classes present"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(arg("embeddings have inconsistent dimensions"));
    }

    let x = linalg::rows_to_array(embeddings);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let lambda = opts.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut t = 0usize;
    let mut objective = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, Array1<f64>, f64)> = None;

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let row = x.row(i);
            let margin = y[i] * (row.dot(&w) + b);
            let shrink = 1.0 - eta * lambda;
            w *= shrink;
            b *= shrink;
            if margin < 1.0 {
                w.scaled_add(eta * y[i], &row);
                b += eta * y[i];
            }
            let len = (w.dot(&w) + b * b).sqrt();
            if len > radius {
                let s = radius / len;
                w *= s;
                b *= s;
            }
        }
        let obj = svm_objective(&x, &y, &w, b, lambda);
        if !obj.is_finite() {
            return Err(Error::Numeric("SVM objective became non-finite".into()));
        }
        objective.push(obj);
        if best.as_ref().is_none_or(|(o, _, _)| obj < *o) {
            best = Some((obj, w.clone(), b));
        }
    }
    let (_, w, b) = best.expect("at least one epoch");
    Ok(SvmFit {
        separator: LinearSeparator { weight: w.to_vec(), bias: b },
        objective,
    })
}

pub fn eval_svm(sep: &LinearSeparator, embeddings: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(arg("embeddings and labels must be non-empty and aligned"));
    }
    let mut hits = 0;
    for (e, &l) in embeddings.iter().zip(labels) {
        if e.len() != sep.weight.len() {
            return Err(arg(format!(
                "embedding dimension {} != separator dimension {}",
                e.len(),
                sep.weight.len()
            )));
        }
        if (sep.decision(e) > 0.0) == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Rows and binary labels of one dump layer, as consumed by the SVM.
pub fn svm_inputs(dump: &ActivationDump, layer: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    (dump.layer_rows(layer), dump.labels.iter().map(|&l| l == 1).collect())
}

/// Linear-SVM accuracy per layer: train on `train`, test on `test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmCurve {
    pub train_accuracies: Vec<f64>,
    pub test_accuracies: Vec<f64>,
    /// Layer with the highest train accuracy (first on ties).
    pub selected_layer: usize,
}

impl SvmCurve {
    pub fn selected_test_accuracy(&self) -> f64 {
        self.test_accuracies[self.selected_layer]
    }
}

pub fn svm_layer_curve(train: &ActivationDump, test: &ActivationDump, opts: &SvmOptions, exec: Exec) -> Result<SvmCurve> {
    if train.n_layers != test.n_layers || train.hidden_size != test.hidden_size {
        return Err(arg("train and test dumps differ in shape"));
    }
    let results = exec.map(train.n_layers, |layer| {
        let (xtr, ytr) = svm_inputs(train, layer);
        let (xte, yte) = svm_inputs(test, layer);
        let sep = fit_linear_svm_with(&xtr, &ytr, opts)?.separator;
        Ok::<_, Error>((eval_svm(&sep, &xtr, &ytr)?, eval_svm(&sep, &xte, &yte)?))
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (train_accuracies, test_accuracies): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let selected_layer = train_accuracies
        .iter()
        .enumerate()
        .fold(0, |best, (i, &a)| if a > train_accuracies[best] { i } else { best });
    Ok(SvmCurve {
        train_accuracies,
        test_accuracies,
        selected_layer,
    })
}

/// One row of a 2-D projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub example: usize,
    pub group_id: String,
    pub label: u32,
    pub pc1: f64,
    pub pc2: f64,
}

/// Coordinates of every example of `layer` on the first two principal
/// components.
pub fn emit_projection(dump: &ActivationDump, layer: usize) -> Result<Vec<ProjectedPoint>> {
    if layer >= dump.n_layers {
        return Err(arg(format!("layer {layer} >= n_layers {}", dump.n_layers)));
    }
    let x = linalg::rows_to_array(&dump.layer_rows(layer));
    let pcs = linalg::principal_components(&x, 2, &PowerIteration::default())?;
    let (xc, _) = linalg::center(&x);
    let c1 = xc.dot(&pcs[0].direction);
    let c2 = xc.dot(&pcs[1].direction);
    Ok((0..dump.n_examples)
        .map(|i| ProjectedPoint {
            example: i,
            group_id: dump.group_ids[i].clone(),
            label: dump.labels[i],
            pc1: c1[i],
            pc2: c2[i],
        })
        .collect())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_separating_axis() {
        let d = 16;
        let train = clustered_pair_dump(200, 1, d, 0.1, &e1(d), 1);
        let probe = fit_probe(&train, 0).unwrap();
        assert!(probe.direction[0].abs() >= 0.99, "cos = {}", probe.direction[0]);
        assert!(probe.train_accuracy >= 0.95);
        assert!((linalg::norm(&probe.direction) - 1.0).abs() < 1e-6);
        let test = clustered_pair_dump(200, 1, d, 0.1, &e1(d), 2);
        assert!(eval_probe(&probe, &test).unwrap() >= 0.95);
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let mut dump = clustered_pair_dump(10, 1, 4, 0.1, &e1(4), 3);
        dump.embeddings.iter_mut().for_each(|v| *v = 0.25);
        assert!(matches!(fit_probe(&dump, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn negation_preserves_answers() {
        let d = 8;
        let dump = clustered_pair_dump(60, 1, d, 0.5, &e1(d), 4);
        let mut neg = dump.clone();
        neg.embeddings.iter_mut().for_each(|v| *v = -*v);
        let a = fit_probe(&dump, 0).unwrap();
        let b = fit_probe(&neg, 0).unwrap();
        assert_eq!(a.train_accuracy, b.train_accuracy);
        let ans_a = choose_answers(&dump, 0, &a.direction, a.sign).unwrap();
        let ans_b = choose_answers(&neg, 0, &b.direction, b.sign).unwrap();
        assert_eq!(ans_a, ans_b);
    }

    #[test]
    fn differencing_option_also_recovers_axis() {
        let d = 8;
        let train = clustered_pair_dump(100, 1, d, 0.1, &e1(d), 5);
        let opts = ProbeOptions {
            stimulus_differencing: true,
            ..ProbeOptions::default()
        };
        let probe = fit_probe_with(&train, 0, &opts).unwrap();
        assert!(probe.direction[0].abs() > 0.99);
    }

    #[test]
    fn random_direction_scores_chance() {
        let d = 32;
        let test = random_pair_dump(1000, d, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let dir: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let probe = ProbeDirection::from_direction(0, dir, SignRule::Argmax).unwrap();
        let acc = eval_probe(&probe, &test).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "acc = {acc}");
    }

    #[test]
    fn dimension_mismatch() {
        let test = random_pair_dump(4, 8, 1);
        let probe = ProbeDirection::from_direction(0, vec![1.0; 4], SignRule::Argmax).unwrap();
        assert!(matches!(eval_probe(&probe, &test), Err(Error::Argument(_))));
    }

    #[test]
    fn tie_breaks() {
        assert_eq!(SignRule::Argmax.select(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(SignRule::Argmin.select(&[0.0, 3.0, 0.0, 1.0]), 0);
    }

    #[test]
    fn curve_score_is_max() {
        let c = LayerCurve::from_accuracies(vec![Some(0.3), Some(0.7), Some(0.5)]).unwrap();
        assert_eq!(c.cognitive_score, 0.7);
        assert_eq!(c.best_layer, 1);
        let single = LayerCurve::from_accuracies(vec![Some(0.42)]).unwrap();
        assert_eq!(single.cognitive_score, 0.42);
        assert!(LayerCurve::from_accuracies(vec![None, None]).is_err());
    }

    #[test]
    fn noise_layer_never_lowers_score() {
        let d = 8;
        let mut train = clustered_pair_dump(50, 2, d, 0.3, &e1(d), 8);
        let mut test = clustered_pair_dump(50, 2, d, 0.3, &e1(d), 9);
        let base = layer_curve(&train, &test).unwrap().cognitive_score;
        for (dump, seed) in [(&mut train, 10u64), (&mut test, 11)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut grown = ActivationDump::zeros(DumpMode::Pair, dump.n_examples, 3, d);
            for e in 0..dump.n_examples {
                for l in 0..2 {
                    grown.vector_mut(e, l).copy_from_slice(dump.vector(e, l));
                }
                for v in grown.vector_mut(e, 2) {
                    *v = normal.sample(&mut rng) as f32;
                }
            }
            grown.labels = dump.labels.clone();
            grown.group_ids = dump.group_ids.clone();
            *dump = grown;
        }
        let grown = layer_curve(&train, &test).unwrap();
        assert_eq!(grown.accuracies.len(), 3);
        assert!(grown.cognitive_score >= base);
    }

    #[test]
    fn curve_parallel_matches_sequential() {
        let d = 8;
        let train = clustered_pair_dump(40, 4, d, 0.4, &e1(d), 12);
        let test = clustered_pair_dump(40, 4, d, 0.4, &e1(d), 13);
        let opts = ProbeOptions::default();
        let a = layer_curve_with(&train, &test, &opts, Exec::Sequential).unwrap();
        let b = layer_curve_with(&train, &test, &opts, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    fn two_blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let cx = if pos { 2.0 } else { -2.0 };
                (vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)], pos)
            })
            .unzip()
    }

    #[test]
    fn svm_separates_blobs() {
        let (x, y) = two_blobs(200, 1);
        let sep = fit_linear_svm(&x, &y, 1e-3).unwrap();
        assert!(eval_svm(&sep, &x, &y).unwrap() >= 0.99);
        let (xt, yt) = two_blobs(200, 2);
        assert_eq!(eval_svm(&sep, &xt, &yt).unwrap(), 1.0);
    }

    #[test]
    fn svm_objective_trends_down() {
        let (x, y) = two_blobs(200, 3);
        let fit = fit_linear_svm_with(&x, &y, &SvmOptions::default()).unwrap();
        let first = fit.objective[0];
        let last = *fit.objective.last().unwrap();
        assert!(last <= first + 1e-9);
        // the objective at w = 0 is exactly 1; epoch-to-epoch rises must stay
        // within 1% of that scale
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-2, "objective jumped: {:?}", w);
        }
    }

    #[test]
    fn svm_heavy_regularization_shrinks() {
        let (x, y) = two_blobs(200, 4);
        let sep = fit_linear_svm(&x, &y, 1e6).unwrap();
        assert!(linalg::norm(&sep.weight) <= 1e-2);
    }

    #[test]
    fn svm_single_class_rejected() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(fit_linear_svm(&x, &[true, true], 1e-3), Err(Error::Argument(_))));
        assert!(fit_linear_svm(&x, &[true, false], 0.0).is_err());
    }

    #[test]
    fn svm_dimension_mismatch() {
        let sep = LinearSeparator { weight: vec![1.0, 0.0], bias: 0.0 };
        assert!(eval_svm(&sep, &[vec![1.0, 2.0, 3.0]], &[true]).is_err());
    }

    #[test]
    fn projection_separates_clusters() {
        let d = 6;
        let dump = clustered_pair_dump(50, 1, d, 0.2, &e1(d), 14);
        let pts = emit_projection(&dump, 0).unwrap();
        assert_eq!(pts.len(), dump.n_examples);
        // Best threshold on pc1, either orientation.
        let mut vals: Vec<f64> = pts.iter().map(|p| p.pc1).collect();
        vals.sort_by(f64::total_cmp);
        let best = vals
            .iter()
            .map(|&t| {
                let hits = pts.iter().filter(|p| (p.pc1 > t) == (p.label == 1)).count();
                hits.max(pts.len() - hits) as f64 / pts.len() as f64
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.95);

        let mut flat = dump.clone();
        flat.embeddings.iter_mut().for_each(|v| *v = 1.0);
        assert!(emit_projection(&flat, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn unit_norm_and_sign_optimal(seed in 0u64..1000, sigma in 0.05f64..2.0) {
                let d = 6;
                let dump = clustered_pair_dump(30, 1, d, sigma, &e1(d), seed);
                let p = fit_probe(&dump, 0).unwrap();
                prop_assert!((linalg::norm(&p.direction) - 1.0).abs() < 1e-6);
                let (amin, amax) = sign_accuracies(&dump, 0, &p.direction).unwrap();
                prop_assert!(p.train_accuracy >= amin.max(amax));
                prop_assert!((0.0..=1.0).contains(&p.train_accuracy));
            }

            #[test]
            fn shift_and_scale_invariant(seed in 0u64..1000, shift in -3.0f64..3.0, scale in 0.5f64..4.0) {
                let d = 6;
                let dump = clustered_pair_dump(30, 1, d, 0.2, &e1(d), seed);
                let base = fit_probe(&dump, 0).unwrap();
                let base_ans = choose_answers(&dump, 0, &base.direction, base.sign).unwrap();

                let mut moved = dump.clone();
                moved.embeddings.iter_mut().for_each(|v| *v = (*v as f64 + shift) as f32);
                let p = fit_probe(&moved, 0).unwrap();
                prop_assert!(linalg::cosine(&p.direction, &base.direction).abs() > 0.999);
                prop_assert_eq!(&choose_answers(&moved, 0, &p.direction, p.sign).unwrap(), &base_ans);

                let mut scaled = dump.clone();
                scaled.embeddings.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
                prop_assert_eq!(&choose_answers(&scaled, 0, &base.direction, base.sign).unwrap(), &base_ans);
            }
        }
    }
}
