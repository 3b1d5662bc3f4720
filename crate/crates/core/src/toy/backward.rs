//! Reverse-mode gradients of the mean next-token cross-entropy.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::model::{gelu_grad, BlockCache, BlockWeights, LayerNormWeights, ResidualOffset, SeqCache, ToyCheckpoint, ToyConfig};
use crate::error::{arg, Result};
use crate::exec::Exec;

/// One training sequence; `targets[t]` is the token expected after
/// position `t`, or `None` when position `t` carries no loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl TrainExample {
    /// Plain next-token prediction over the whole sequence.
    pub fn language_model(tokens: Vec<usize>) -> Self {
        let mut targets: Vec<Option<usize>> = tokens[1..].iter().copied().map(Some).collect();
        targets.push(None);
        Self { tokens, targets }
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

fn check_batch(ckpt: &ToyCheckpoint, batch: &[TrainExample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(arg("batch is empty"));
    }
    let mut n = 0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.tokens.len() != ex.targets.len() {
            return Err(arg(format!(
                "example {i}: {} tokens but {} targets",
                ex.tokens.len(),
                ex.targets.len()
            )));
        }
        ckpt.check_tokens(&ex.tokens)?;
        if let Some(bad) = ex.targets.iter().flatten().find(|&&t| t >= ckpt.config.vocab_size) {
            return Err(arg(format!("example {i}: target id {bad} out of range")));
        }
        n += ex.n_targets();
    }
    if n == 0 {
        return Err(arg("batch has no target positions"));
    }
    Ok(n)
}

/// Summed cross-entropy of one sequence and `∂(sum/norm)/∂logits`.
fn loss_and_dlogits(cache: &SeqCache, targets: &[Option<usize>], norm: f64) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(cache.logits.dim());
    let mut loss = 0.0;
    for (t, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row = cache.logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[target];
        let mut d = dlogits.row_mut(t);
        for (j, v) in d.iter_mut().enumerate() {
            *v = (row[j] - lse).exp() / norm;
        }
        d[target] -= 1.0 / norm;
    }
    (loss, dlogits)
}

fn ln_backward(dy: &Array2<f64>, xhat: &Array2<f64>, rstd: &ndarray::Array1<f64>, w: &LayerNormWeights, g: &mut LayerNormWeights) -> Array2<f64> {
    g.gain += &(dy * xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &w.gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for (((mut out, dxh), xh), &r) in dx.rows_mut().into_iter().zip(dxhat.rows()).zip(xhat.rows()).zip(rstd.iter()) {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        for ((o, &a), &b) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = r * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

/// Backprop through one block. `dx` is the gradient at the block output
/// `x_{i+1}`; returns the gradient at its input `x_i`.
fn block_backward(b: &BlockWeights, cfg: &ToyConfig, c: &BlockCache, dx: &Array2<f64>, g: &mut BlockWeights) -> Array2<f64> {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    g.w_out += &c.a.t().dot(dx);
    g.b_out += &dx.sum_axis(Axis(0));
    let mut du = dx.dot(&b.w_out.t());
    ndarray::Zip::from(&mut du).and(&c.u).for_each(|d, &u| *d *= gelu_grad(u));
    g.w_in += &c.h.t().dot(&du);
    g.b_in += &du.sum_axis(Axis(0));
    let mut dh = du.dot(&b.w_in.t());

    g.wo += &c.ctx.t().dot(dx);
    g.bo += &dx.sum_axis(Axis(0));
    let dctx = dx.dot(&b.wo.t());
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (head, p) in c.probs.iter().enumerate() {
        let cols = s![.., head * hd..(head + 1) * hd];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let total = row.sum();
            for (v, &pv) in row.iter_mut().zip(prow.iter()) {
                *v -= pv * total;
            }
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.h.t().dot(&dq);
    g.wk += &c.h.t().dot(&dk);
    g.wv += &c.h.t().dot(&dv);
    dh += &dq.dot(&b.wq.t());
    dh += &dk.dot(&b.wk.t());
    dh += &dv.dot(&b.wv.t());

    dx + &ln_backward(&dh, &c.xhat, &c.rstd, &b.norm, &mut g.norm)
}

/// Gradients of one sequence. Returns residual gradients `∂J/∂x_0..x_L`.
fn backward_sequence(ckpt: &ToyCheckpoint, cache: &SeqCache, dlogits: &Array2<f64>, g: &mut ToyCheckpoint) -> Vec<Array2<f64>> {
    let l = ckpt.blocks.len();
    g.vocab_linear += &cache.final_h.t().dot(dlogits);
    let dhf = dlogits.dot(&ckpt.vocab_linear.t());
    let mut dx = ln_backward(&dhf, &cache.final_xhat, &cache.final_rstd, &ckpt.final_norm, &mut g.final_norm);
    let mut res = vec![Array2::zeros((0, 0)); l + 1];
    for i in (0..l).rev() {
        let next = block_backward(&ckpt.blocks[i], &ckpt.config, &cache.blocks[i], &dx, &mut g.blocks[i]);
        res[i + 1] = std::mem::replace(&mut dx, next);
    }
    for (pos, (&tok, row)) in cache.tokens.iter().zip(dx.rows()).enumerate() {
        let mut e = g.embedding_table.row_mut(tok);
        e += &row;
        let mut p = g.positional_table.row_mut(pos);
        p += &row;
    }
    res[0] = dx;
    res
}

impl ToyCheckpoint {
    pub fn add_assign(&mut self, other: &ToyCheckpoint) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Loss, parameter gradients and per-example residual gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Mean cross-entropy over all target positions of the batch.
    pub loss: f64,
    pub grads: ToyCheckpoint,
    pub n_targets: usize,
    /// `[example][layer 0..=L]`, each `T × d`.
    pub residual_grads: Vec<Vec<Array2<f64>>>,
}

pub fn loss_and_gradients(ckpt: &ToyCheckpoint, batch: &[TrainExample], exec: Exec) -> Result<BatchGradients> {
    let n = check_batch(ckpt, batch)?;
    let norm = n as f64;
    let per_example = exec.map_slice(batch, |ex| {
        let cache = ckpt.forward_cached(&ex.tokens, None)?;
        let (loss, dlogits) = loss_and_dlogits(&cache, &ex.targets, norm);
        let mut g = ckpt.zeros_like();
        let res = backward_sequence(ckpt, &cache, &dlogits, &mut g);
        Ok::<_, crate::Error>((loss, g, res))
    });
    let mut grads = ckpt.zeros_like();
    let mut loss = 0.0;
    let mut residual_grads = Vec::with_capacity(batch.len());
    for r in per_example {
        let (l, g, res) = r?;
        loss += l;
        grads.add_assign(&g);
        residual_grads.push(res);
    }
    Ok(BatchGradients {
        loss: loss / norm,
        grads,
        n_targets: n,
        residual_grads,
    })
}

/// Mean cross-entropy of a batch (forward only).
pub fn batch_loss(ckpt: &ToyCheckpoint, batch: &[TrainExample]) -> Result<f64> {
    batch_loss_with_offset(ckpt, batch, None)
}

pub(crate) fn batch_loss_with_offset(ckpt: &ToyCheckpoint, batch: &[TrainExample], offset: Option<(usize, ResidualOffset<'_>)>) -> Result<f64> {
    let n = check_batch(ckpt, batch)?;
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let o = offset.filter(|(e, _)| *e == i).map(|(_, o)| o);
        let cache = ckpt.forward_cached(&ex.tokens, o)?;
        total += loss_and_dlogits(&cache, &ex.targets, 1.0).0;
    }
    Ok(total / n as f64)
}

/// Mean loss after adding `delta` to residual `x_layer` at `position` of
/// example `example` (layer 0 is the embedding sum).
pub fn batch_loss_with_residual_offset(ckpt: &ToyCheckpoint, batch: &[TrainExample], example: usize, layer: usize, position: usize, delta: &[f64]) -> Result<f64> {
    if layer > ckpt.n_layers() || delta.len() != ckpt.config.hidden_size {
        return Err(arg("residual offset out of range"));
    }
    batch_loss_with_offset(
        ckpt,
        batch,
        Some((
            example,
            ResidualOffset {
                layer,
                position,
                delta,
            },
        )),
    )
}

/// Per-example gradients `∂J/∂x_i` (i = 1..L) at each example's last token.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCapture {
    pub loss: f64,
    /// `[example][layer]`, layer `i` holding `∂J/∂x_{i+1}`.
    pub per_example: Vec<Vec<Vec<f64>>>,
}

pub fn backward_capture(ckpt: &ToyCheckpoint, batch: &[TrainExample]) -> Result<GradientCapture> {
    let bg = loss_and_gradients(ckpt, batch, Exec::default())?;
    let per_example = bg
        .residual_grads
        .iter()
        .zip(batch)
        .map(|(res, ex)| {
            let last = ex.tokens.len() - 1;
            res[1..].iter().map(|g| g.row(last).to_vec()).collect()
        })
        .collect();
    Ok(GradientCapture {
        loss: bg.loss,
        per_example,
    })
}
