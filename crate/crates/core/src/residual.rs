//! Residual-stream behaviour of a pre-LN decoder: norm growth with depth,
//! similarity of adjacent normalized states and of adjacent gradients,
//! plateau length of a layer-accuracy curve, and the accuracy cost of
//! deleting a block.
//!
//! Layer indices follow the residual recurrence: index 0 is the embedding
//! `x_0`, index `i ≥ 1` is the output of block `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::exec::Exec;
use crate::expression::{eval_expressive, GenerationParams, PromptMode};
use crate::linalg::{cosine, layer_norm, norm, ols_slope, rms};
use crate::probe::LayerCurve;
use crate::templates::ChoiceQuestion;
use crate::toy::{backward_capture, forward_capture, ToyCheckpoint, ToyModel, TrainExample};

pub const MIN_PROMPTS: usize = 10;
pub const MIN_LAYERS: usize = 8;
pub const DEFAULT_PLATEAU_EPSILON: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProfile {
    /// Mean `‖x_i‖` for `i = 0..=L`.
    pub norms: Vec<f64>,
    /// Mean `cos(LN x_i, LN x_{i+1})` for `i = 0..L`.
    pub cosines: Vec<f64>,
    /// Mean `cos(∂J/∂x_i, ∂J/∂x_{i+1})` for `i = 1..L` (entry 0 is `i = 1`).
    pub gradient_cosines: Option<Vec<f64>>,
    pub loglog_slope: f64,
}

/// Last-token residual states `x_0..x_L` of every prompt.
fn states(ckpt: &ToyCheckpoint, prompts: &[Vec<usize>], exec: Exec) -> Result<Vec<Vec<Vec<f64>>>> {
    if prompts.len() < MIN_PROMPTS {
        return Err(arg(format!("need at least {MIN_PROMPTS} prompts, got {}", prompts.len())));
    }
    if ckpt.n_layers() < MIN_LAYERS {
        return Err(arg(format!("need at least {MIN_LAYERS} layers, got {}", ckpt.n_layers())));
    }
    exec.map_slice(prompts, |p| {
        let t = forward_capture(ckpt, p)?;
        let mut xs = Vec::with_capacity(t.layers.len() + 1);
        xs.push(t.embedding);
        xs.extend(t.layers);
        Ok(xs)
    })
    .into_iter()
    .collect()
}

fn mean_over_prompts(per_prompt: &[Vec<f64>]) -> Vec<f64> {
    let n = per_prompt.len() as f64;
    let mut acc = vec![0.0; per_prompt[0].len()];
    for row in per_prompt {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

/// Slope of `ln ‖x_i‖` on `ln i` over `i = 2..=L`.
pub fn loglog_slope(norms: &[f64]) -> Result<f64> {
    if norms.len() < 4 {
        return Err(arg("need norms for at least layers 0..=3"));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (2..norms.len()).map(|i| ((i as f64).ln(), norms[i].ln())).unzip();
    Ok(ols_slope(&xs, &ys))
}

/// Mean last-token norm per layer and the log-log growth slope.
pub fn norm_profile(ckpt: &ToyCheckpoint, prompts: &[Vec<usize>], exec: Exec) -> Result<(Vec<f64>, f64)> {
    let xs = states(ckpt, prompts, exec)?;
    let per: Vec<Vec<f64>> = xs.iter().map(|p| p.iter().map(|x| norm(x)).collect()).collect();
    let norms = mean_over_prompts(&per);
    let slope = loglog_slope(&norms)?;
    Ok((norms, slope))
}

pub fn adjacent_cosine_profile(ckpt: &ToyCheckpoint, prompts: &[Vec<usize>], exec: Exec) -> Result<Vec<f64>> {
    let xs = states(ckpt, prompts, exec)?;
    Ok(adjacent_cosines(&xs))
}

fn adjacent_cosines(xs: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let per: Vec<Vec<f64>> = xs
        .iter()
        .map(|p| {
            let ln: Vec<Vec<f64>> = p.iter().map(|x| layer_norm(x, LN_EPS)).collect();
            ln.windows(2).map(|w| cosine(&w[0], &w[1])).collect()
        })
        .collect();
    mean_over_prompts(&per)
}

/// `√(L/(L+1)) − √(1/(L+1))`.
pub fn cosine_lower_bound(layer: usize) -> Result<f64> {
    if layer == 0 {
        return Err(arg("layer must be at least 1"));
    }
    let l = layer as f64;
    Ok((l / (l + 1.0)).sqrt() - (1.0 / (l + 1.0)).sqrt())
}

/// Fraction of layers `L ≥ from` whose adjacent cosine (`cosines[L]`)
/// meets [`cosine_lower_bound`].
pub fn bound_coverage(cosines: &[f64], from: usize) -> Result<f64> {
    let from = from.max(1);
    if cosines.len() <= from {
        return Err(arg("no layers at or above the starting index"));
    }
    let hits = (from..cosines.len())
        .filter(|&l| cosines[l] >= cosine_lower_bound(l).unwrap())
        .count();
    Ok(hits as f64 / (cosines.len() - from) as f64)
}

/// Mean `cos(∂J/∂x_i, ∂J/∂x_{i+1})` over the batch for `i = 1..L`, taken
/// at each example's last position.
pub fn adjacent_gradient_cosine(ckpt: &ToyCheckpoint, batch: &[TrainExample]) -> Result<Vec<f64>> {
    let cap = backward_capture(ckpt, batch)?;
    let per: Vec<Vec<f64>> = cap
        .per_example
        .iter()
        .map(|g| g.windows(2).map(|w| cosine(&w[0], &w[1])).collect())
        .collect();
    if per[0].is_empty() {
        return Err(arg("need at least two layers"));
    }
    Ok(mean_over_prompts(&per))
}

pub fn residual_profile(ckpt: &ToyCheckpoint, prompts: &[Vec<usize>], gradient_batch: Option<&[TrainExample]>, exec: Exec) -> Result<ResidualProfile> {
    let xs = states(ckpt, prompts, exec)?;
    let per: Vec<Vec<f64>> = xs.iter().map(|p| p.iter().map(|x| norm(x)).collect()).collect();
    let norms = mean_over_prompts(&per);
    let loglog_slope = loglog_slope(&norms)?;
    let gradient_cosines = gradient_batch.map(|b| adjacent_gradient_cosine(ckpt, b)).transpose()?;
    Ok(ResidualProfile {
        norms,
        cosines: adjacent_cosines(&xs),
        gradient_cosines,
        loglog_slope,
    })
}

/// Uniformly random token prompts of length `len`.
pub fn random_prompts(vocab_size: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(0..vocab_size)).collect()).collect()
}

/// Random prompts with a random target at every position, so the
/// last-position gradients are nonzero.
pub fn random_gradient_batch(vocab_size: usize, n: usize, len: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
            let targets = (0..len).map(|_| Some(rng.random_range(0..vocab_size))).collect();
            TrainExample { tokens, targets }
        })
        .collect()
}

/// `(‖x‖, √d · RMS(x))` — equal up to round-off for any `x`.
pub fn norm_rms_sides(x: &[f64]) -> (f64, f64) {
    (norm(x), (x.len() as f64).sqrt() * rms(x))
}

/// Relative additivity error `|Var(a+b) − Var(a) − Var(b)| / Var(a+b)` for
/// independent Gaussian `a` (σ=1) and uniform `b` on `[−1, 1]`, pooled over
/// `draws` vectors of dimension `d`.
pub fn variance_additivity_error(d: usize, draws: usize, seed: u64) -> Result<f64> {
    if d == 0 || draws < 2 {
        return Err(arg("need d >= 1 and at least two draws"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut acc = [Welford::default(), Welford::default(), Welford::default()];
    for _ in 0..draws * d {
        let a: f64 = gauss.sample(&mut rng);
        let b: f64 = rng.random_range(-1.0..1.0);
        acc[0].push(a);
        acc[1].push(b);
        acc[2].push(a + b);
    }
    let [va, vb, vs] = acc.map(|w| w.variance());
    Ok((vs - va - vb).abs() / vs)
}

#[derive(Default, Clone, Copy)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauStat {
    pub epsilon: f64,
    pub plateau_len: usize,
    pub depth: usize,
    pub proportion: f64,
    /// First layer of the plateau run.
    pub start: usize,
}

/// Longest maximal run of layers within `epsilon` of the best accuracy
/// that contains a best layer; later runs win ties. Missing accuracies
/// break runs.
pub fn plateau_from_accuracies(accuracies: &[Option<f64>], epsilon: f64) -> Result<PlateauStat> {
    if !(epsilon > 0.0) {
        return Err(arg("epsilon must be positive"));
    }
    let max = accuracies
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(arg("curve has no accuracies"));
    }
    let inside = |a: &Option<f64>| a.is_some_and(|v| v >= max - epsilon);
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < accuracies.len() {
        if !inside(&accuracies[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < accuracies.len() && inside(&accuracies[i]) {
            i += 1;
        }
        let has_max = accuracies[start..i].contains(&Some(max));
        if has_max && best.is_none_or(|(_, len)| i - start >= len) {
            best = Some((start, i - start));
        }
    }
    let (start, plateau_len) = best.expect("the argmax layer lies in some run");
    Ok(PlateauStat {
        epsilon,
        plateau_len,
        depth: accuracies.len(),
        proportion: plateau_len as f64 / accuracies.len() as f64,
        start,
    })
}

pub fn plateau_proportion(curve: &LayerCurve, epsilon: f64) -> Result<PlateauStat> {
    plateau_from_accuracies(&curve.accuracies, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeletionReport {
    pub layer: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta: f64,
}

/// Zero-shot accuracy with and without block `layer_idx` (0-based).
pub fn layer_deletion_report(model: &ToyModel, questions: &[ChoiceQuestion], layer_idx: usize, params: &GenerationParams, exec: Exec) -> Result<DeletionReport> {
    let pruned = ToyModel {
        checkpoint: model.checkpoint.delete_layer(layer_idx)?,
        tokenizer: model.tokenizer.clone(),
    };
    let acc_before = eval_expressive(model, questions, params, &PromptMode::ZeroShot, exec)?.accuracy;
    let acc_after = eval_expressive(&pruned, questions, params, &PromptMode::ZeroShot, exec)?.accuracy;
    Ok(DeletionReport {
        layer: layer_idx,
        acc_before,
        acc_after,
        delta: acc_after - acc_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spearman;
    use crate::toy::{SyntheticTask, SyntheticTaskSpec, ToyConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn zero_blocks(cfg: &ToyConfig) -> ToyCheckpoint {
        let mut c = ToyCheckpoint::init_random(cfg).unwrap();
        for b in &mut c.blocks {
            b.scale_output(0.0);
        }
        c
    }

    #[test]
    fn bound_values() {
        assert_eq!(cosine_lower_bound(1).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_lower_bound(3).unwrap(), 0.3660, epsilon = 1e-4);
        assert_abs_diff_eq!(cosine_lower_bound(99).unwrap(), 0.8950, epsilon = 1e-4);
        assert!(cosine_lower_bound(0).is_err());
    }

    #[test]
    fn preconditions() {
        let c = ToyCheckpoint::init_random(&ToyConfig::new(10, 8, 4, 2, 8, 0)).unwrap();
        let prompts = random_prompts(10, 20, 4, 1);
        assert!(norm_profile(&c, &prompts, Exec::Parallel).is_err());
        let c = ToyCheckpoint::init_random(&ToyConfig::new(10, 8, 8, 2, 8, 0)).unwrap();
        assert!(norm_profile(&c, &prompts[..9], Exec::Parallel).is_err());
        assert!(norm_profile(&c, &prompts, Exec::Parallel).is_ok());
    }

    #[test]
    fn zero_blocks_are_exact() {
        let cfg = ToyConfig::new(12, 16, 8, 2, 8, 3);
        let c = zero_blocks(&cfg);
        let cos = adjacent_cosine_profile(&c, &random_prompts(12, 10, 5, 2), Exec::Parallel).unwrap();
        assert_eq!(cos.len(), 8);
        assert!(cos.iter().all(|&v| v == 1.0));
        let g = adjacent_gradient_cosine(&c, &random_gradient_batch(12, 4, 5, 3)).unwrap();
        assert_eq!(g.len(), 7);
        assert!(g.iter().all(|&v| v == 1.0), "{g:?}");
    }

    #[test]
    fn random_init_residual_laws() {
        let cfg = ToyConfig::new(50, 64, 64, 4, 16, 11);
        let c = ToyCheckpoint::init_random(&cfg).unwrap();
        let p = residual_profile(&c, &random_prompts(50, 100, 8, 5), None, Exec::Parallel).unwrap();
        assert!((0.4..=0.6).contains(&p.loglog_slope), "slope {}", p.loglog_slope);
        let layers: Vec<f64> = (0..p.cosines.len()).map(|i| i as f64).collect();
        assert!(spearman(&layers, &p.cosines) > 0.8);
        assert!(p.cosines.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(bound_coverage(&p.cosines, 4).unwrap() >= 0.95);
    }

    #[test]
    fn gradient_similarity_grows_with_depth() {
        let cfg = ToyConfig::new(40, 64, 32, 4, 12, 21);
        let c = ToyCheckpoint::init_random(&cfg).unwrap();
        let g = adjacent_gradient_cosine(&c, &random_gradient_batch(40, 16, 8, 9)).unwrap();
        assert!(g.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        // g[k] pairs layers k+1 and k+2
        let shallow: f64 = g[..3].iter().sum::<f64>() / 3.0;
        let deep = &g[15..];
        let deep = deep.iter().sum::<f64>() / deep.len() as f64;
        assert!(deep > shallow, "deep {deep} shallow {shallow}");
    }

    #[test]
    fn norm_rms_identity_and_variance_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [1, 7, 64, 1000] {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (a, b) = norm_rms_sides(&x);
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * a);
        }
        assert!(variance_additivity_error(64, 100_000, 1).unwrap() <= 0.02);
        assert!(variance_additivity_error(0, 10, 1).is_err());
    }

    #[test]
    fn plateau_examples() {
        let s = plateau_from_accuracies(&[0.3, 0.5, 0.7, 0.5, 0.3].map(Some), 0.02).unwrap();
        assert_eq!((s.plateau_len, s.start), (1, 2));
        assert_abs_diff_eq!(s.proportion, 0.2);
        let s = plateau_from_accuracies(&[Some(0.6); 7], 0.02).unwrap();
        assert_eq!(s.proportion, 1.0);
        // two equal-length runs holding the max: the later one wins
        let s = plateau_from_accuracies(&[0.9, 0.9, 0.1, 0.9, 0.9, 0.2].map(Some), 0.02).unwrap();
        assert_eq!((s.plateau_len, s.start), (2, 3));
        let s = plateau_from_accuracies(&[Some(0.5), Some(0.9), None, Some(0.9)], 0.02).unwrap();
        assert_eq!(s.plateau_len, 1);
        assert!(plateau_from_accuracies(&[], 0.02).is_err());
        assert!(plateau_from_accuracies(&[None, None], 0.02).is_err());
        assert!(plateau_from_accuracies(&[Some(0.5)], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn plateau_shift_invariant(acc in proptest::collection::vec(0.0f64..1.0, 1..40), shift in -0.5f64..0.5) {
            let a: Vec<Option<f64>> = acc.iter().map(|&v| Some(v)).collect();
            let b: Vec<Option<f64>> = acc.iter().map(|&v| Some(v + shift)).collect();
            let (x, y) = (plateau_from_accuracies(&a, 0.05).unwrap(), plateau_from_accuracies(&b, 0.05).unwrap());
            // values sitting on the band edge may flip under round-off
            let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(acc.iter().all(|v| ((max - v) - 0.05).abs() > 1e-9));
            prop_assert_eq!(x.plateau_len, y.plateau_len);
            prop_assert!(x.proportion > 0.0 && x.proportion <= 1.0);
        }
    }

    #[test]
    fn deletion_of_zero_block_is_free() {
        let task = SyntheticTask::new(SyntheticTaskSpec { n_keys: 6, ..Default::default() }).unwrap();
        let mut ck = ToyCheckpoint::init_random(&ToyConfig::new(task.vocab_size(), 16, 3, 2, 96, 2)).unwrap();
        ck.blocks[1].scale_output(0.0);
        let m = ToyModel::new(ck, task.tokenizer().clone()).unwrap();
        let qs = task.questions(8, 1, "q");
        let params = GenerationParams::greedy(4);
        let r = layer_deletion_report(&m, &qs, 1, &params, Exec::Parallel).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(layer_deletion_report(&m, &qs, 3, &params, Exec::Parallel).is_err());
    }
}
