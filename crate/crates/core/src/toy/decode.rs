use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::ToyCheckpoint;
use crate::error::Result;
use crate::expression::GenerationParams;

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Emits the argmax token until `max_new` tokens, the `stop` token (not
/// included in the output) or the context limit.
pub fn greedy_decode(ckpt: &ToyCheckpoint, prompt: &[usize], max_new: usize, stop: Option<usize>) -> Result<Vec<usize>> {
    let mut state = ckpt.decode_prompt(prompt)?;
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = argmax(state.logits().as_slice().expect("contiguous"));
        if Some(next) == stop {
            break;
        }
        out.push(next);
        if state.len() >= ckpt.config.max_seq {
            break;
        }
        ckpt.decode_step(&mut state, next)?;
    }
    Ok(out)
}

/// Temperature → repetition penalty → top-k → top-p, then one categorical
/// draw. `generated` lists the tokens emitted so far.
pub(crate) fn sample_next(logits: &[f64], generated: &[usize], params: &GenerationParams, rng: &mut ChaCha8Rng) -> usize {
    let mut z: Vec<f64> = logits.iter().map(|v| v / params.temperature).collect();
    if params.repetition_penalty != 1.0 {
        let mut seen = vec![false; z.len()];
        for &t in generated {
            seen[t] = true;
        }
        for (v, s) in z.iter_mut().zip(seen) {
            if s {
                *v = if *v > 0.0 { *v / params.repetition_penalty } else { *v * params.repetition_penalty };
            }
        }
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable: equal logits keep the lower index first
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    order.truncate(params.top_k.min(z.len()));
    if order.len() == 1 {
        return order[0];
    }
    let max = z[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (z[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut keep = 0;
    let mut mass = 0.0;
    for w in &weights {
        mass += w / total;
        keep += 1;
        if mass >= params.top_p {
            break;
        }
    }
    let kept_total: f64 = weights[..keep].iter().sum();
    let mut u = rng.random::<f64>() * kept_total;
    for (i, w) in weights[..keep].iter().enumerate() {
        if u < *w {
            return order[i];
        }
        u -= w;
    }
    order[keep - 1]
}

/// Seeded sampling with up to `params.max_tokens` new tokens, stopping
/// early at `stop` (excluded) or the context limit.
pub fn sample_decode(ckpt: &ToyCheckpoint, prompt: &[usize], params: &GenerationParams, stop: Option<usize>) -> Result<Vec<usize>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut state = ckpt.decode_prompt(prompt)?;
    let mut out = Vec::new();
    while out.len() < params.max_tokens {
        let next = sample_next(state.logits().as_slice().expect("contiguous"), &out, params, &mut rng);
        if Some(next) == stop {
            break;
        }
        out.push(next);
        if state.len() >= ckpt.config.max_seq {
            break;
        }
        ckpt.decode_step(&mut state, next)?;
    }
    Ok(out)
}
