use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::store::Stage;

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// MLP width as a multiple of `hidden_size`.
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(vocab_size: usize, hidden_size: usize, n_layers: usize, n_heads: usize, max_seq: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            hidden_size,
            n_layers,
            n_heads,
            max_seq,
            mlp_ratio: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(arg(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(arg(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden_size * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormWeights {
    fn identity(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

/// One parallel pre-LN block: `x + attn(LN(x)) + mlp(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm: LayerNormWeights,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl BlockWeights {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let d = cfg.hidden_size;
        let h = cfg.mlp_hidden();
        Self {
            norm: LayerNormWeights::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            w_in: Array2::zeros((d, h)),
            b_in: Array1::zeros(h),
            w_out: Array2::zeros((h, d)),
            b_out: Array1::zeros(d),
        }
    }

    fn random(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_size;
        let h = cfg.mlp_hidden();
        Self {
            norm: LayerNormWeights::identity(d),
            wq: normal((d, d), rng),
            wk: normal((d, d), rng),
            wv: normal((d, d), rng),
            wo: normal((d, d), rng),
            bo: Array1::zeros(d),
            w_in: normal((d, h), rng),
            b_in: Array1::zeros(h),
            w_out: normal((h, d), rng),
            b_out: Array1::zeros(d),
        }
    }

    /// Scales the block's contribution to the residual stream.
    pub fn scale_output(&mut self, factor: f64) {
        self.wo *= factor;
        self.bo *= factor;
        self.w_out *= factor;
        self.b_out *= factor;
    }

    fn tensors(&self) -> [&[f64]; 11] {
        [
            slice(&self.norm.gain),
            slice(&self.norm.bias),
            slice(&self.wq),
            slice(&self.wk),
            slice(&self.wv),
            slice(&self.wo),
            slice(&self.bo),
            slice(&self.w_in),
            slice(&self.b_in),
            slice(&self.w_out),
            slice(&self.b_out),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        [
            slice_mut(&mut self.norm.gain),
            slice_mut(&mut self.norm.bias),
            slice_mut(&mut self.wq),
            slice_mut(&mut self.wk),
            slice_mut(&mut self.wv),
            slice_mut(&mut self.wo),
            slice_mut(&mut self.bo),
            slice_mut(&mut self.w_in),
            slice_mut(&mut self.b_in),
            slice_mut(&mut self.w_out),
            slice_mut(&mut self.b_out),
        ]
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

fn normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Where a checkpoint sits in its training history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: u64,
    pub training_tokens: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            stage: Stage::Toy,
            step: 0,
            training_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCheckpoint {
    pub config: ToyConfig,
    pub meta: CheckpointMeta,
    /// `vocab_size × d`
    pub embedding_table: Array2<f64>,
    /// `max_seq × d`
    pub positional_table: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNormWeights,
    /// Untied output projection, `d × vocab_size`.
    pub vocab_linear: Array2<f64>,
}

impl ToyCheckpoint {
    /// Deterministic random initialization from `config.seed`.
    pub fn init_random(config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_size;
        let embedding_table = normal((config.vocab_size, d), &mut rng);
        let positional_table = normal((config.max_seq, d), &mut rng);
        let blocks = (0..config.n_layers).map(|_| BlockWeights::random(config, &mut rng)).collect();
        let vocab_linear = normal((d, config.vocab_size), &mut rng);
        Ok(Self {
            config: *config,
            meta: CheckpointMeta::default(),
            embedding_table,
            positional_table,
            blocks,
            final_norm: LayerNormWeights::identity(d),
            vocab_linear,
        })
    }

    /// All-zero parameters with this checkpoint's shapes (gradient buffers,
    /// optimizer moments).
    pub fn zeros_like(&self) -> Self {
        Self {
            meta: self.meta,
            ..Self::zeros(&self.config)
        }
    }

    pub(crate) fn zeros(c: &ToyConfig) -> Self {
        let d = c.hidden_size;
        Self {
            config: *c,
            meta: CheckpointMeta::default(),
            embedding_table: Array2::zeros((c.vocab_size, d)),
            positional_table: Array2::zeros((c.max_seq, d)),
            blocks: (0..c.n_layers).map(|_| BlockWeights::zeros(c)).collect(),
            final_norm: LayerNormWeights::zeros(d),
            vocab_linear: Array2::zeros((d, c.vocab_size)),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Parameter tensors in serialization order: embedding, positional,
    /// per block (norm gain, norm bias, wq, wk, wv, wo, bo, w_in, b_in,
    /// w_out, b_out), final gain, final bias, vocab linear.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![slice(&self.embedding_table), slice(&self.positional_table)];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(slice(&self.final_norm.gain));
        out.push(slice(&self.final_norm.bias));
        out.push(slice(&self.vocab_linear));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            slice_mut(&mut self.embedding_table),
            slice_mut(&mut self.positional_table),
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(slice_mut(&mut self.final_norm.gain));
        out.push(slice_mut(&mut self.final_norm.bias));
        out.push(slice_mut(&mut self.vocab_linear));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks token ids and length against the config.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(arg("token sequence is empty"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(arg(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(arg(format!("token id {bad} >= vocab_size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Returns a copy without block `layer_idx`; remaining blocks keep their
    /// order.
    pub fn delete_layer(&self, layer_idx: usize) -> Result<Self> {
        let l = self.n_layers();
        if l < 2 {
            return Err(arg("cannot delete the only layer"));
        }
        if layer_idx >= l {
            return Err(arg(format!("layer index {layer_idx} >= n_layers {l}")));
        }
        let mut out = self.clone();
        out.blocks.remove(layer_idx);
        out.config.n_layers = l - 1;
        Ok(out)
    }
}

/// Row-wise layer norm; returns `(output, normalized input, 1/std per row)`.
pub(crate) fn layer_norm_rows(x: &Array2<f64>, w: &LayerNormWeights) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &w.gain + &w.bias;
    (y, xhat, rstd)
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// In-place causal softmax of a `T × T` score matrix.
fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= sum;
    }
}

/// Intermediate values of one block, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
    pub h: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub u: Array2<f64>,
    pub a: Array2<f64>,
}

/// Full forward state of one sequence.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    pub tokens: Vec<usize>,
    /// Residual states `x_0..x_L`, each `T × d`.
    pub residuals: Vec<Array2<f64>>,
    pub blocks: Vec<BlockCache>,
    pub final_xhat: Array2<f64>,
    pub final_rstd: Array1<f64>,
    pub final_h: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Additive offset injected into residual `x_layer` at one position; used by
/// finite-difference checks.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResidualOffset<'a> {
    pub layer: usize,
    pub position: usize,
    pub delta: &'a [f64],
}

fn block_forward(b: &BlockWeights, cfg: &ToyConfig, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
    let t = x.nrows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let (h, xhat, rstd) = layer_norm_rows(x, &b.norm);
    let q = h.dot(&b.wq);
    let k = h.dot(&b.wk);
    let v = h.dot(&b.wv);
    let mut ctx = Array2::zeros((t, cfg.hidden_size));
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        causal_softmax(&mut p);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let attn = ctx.dot(&b.wo) + &b.bo;
    let u = h.dot(&b.w_in) + &b.b_in;
    let a = u.mapv(gelu);
    let mlp = a.dot(&b.w_out) + &b.b_out;
    let delta = attn + mlp;
    (
        delta,
        BlockCache {
            xhat,
            rstd,
            h,
            q,
            k,
            v,
            probs,
            ctx,
            u,
            a,
        },
    )
}

impl ToyCheckpoint {
    fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let d = self.config.hidden_size;
        let mut x = Array2::zeros((tokens.len(), d));
        for (pos, (&tok, mut row)) in tokens.iter().zip(x.rows_mut()).enumerate() {
            row.assign(&self.embedding_table.row(tok));
            row += &self.positional_table.row(pos);
        }
        x
    }

    pub(crate) fn forward_cached(&self, tokens: &[usize], offset: Option<ResidualOffset<'_>>) -> Result<SeqCache> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        let apply_offset = |x: &mut Array2<f64>, layer: usize| {
            if let Some(o) = offset {
                if o.layer == layer {
                    let mut row = x.row_mut(o.position);
                    row += &ArrayView1::from(o.delta);
                }
            }
        };
        apply_offset(&mut x, 0);
        let mut residuals = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        residuals.push(x.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            let (delta, cache) = block_forward(b, &self.config, &x);
            x += &delta;
            apply_offset(&mut x, i + 1);
            residuals.push(x.clone());
            caches.push(cache);
        }
        let (final_h, final_xhat, final_rstd) = layer_norm_rows(&x, &self.final_norm);
        let logits = final_h.dot(&self.vocab_linear);
        Ok(SeqCache {
            tokens: tokens.to_vec(),
            residuals,
            blocks: caches,
            final_xhat,
            final_rstd,
            final_h,
            logits,
        })
    }

    /// Contribution of block `layer` to the residual stream for input `x`.
    pub fn block_delta(&self, layer: usize, x: &Array2<f64>) -> Array2<f64> {
        block_forward(&self.blocks[layer], &self.config, x).0
    }
}

/// Last-token view of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `x_1..x_L` at the last position (block outputs).
    pub layers: Vec<Vec<f64>>,
    /// `x_0` (token + position embedding) at the last position.
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward_capture(ckpt: &ToyCheckpoint, tokens: &[usize]) -> Result<ForwardTrace> {
    let cache = ckpt.forward_cached(tokens, None)?;
    let last = tokens.len() - 1;
    let row = |a: &Array2<f64>| a.row(last).to_vec();
    Ok(ForwardTrace {
        layers: cache.residuals[1..].iter().map(row).collect(),
        embedding: row(&cache.residuals[0]),
        logits: row(&cache.logits),
    })
}

/// Full-sequence residual states `x_0..x_L` (each `T × d`) and logits.
pub fn forward_full(ckpt: &ToyCheckpoint, tokens: &[usize]) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    let cache = ckpt.forward_cached(tokens, None)?;
    Ok((cache.residuals, cache.logits))
}

/// Incremental decoding state holding per-layer keys and values.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
    logits: Array1<f64>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token logits after the last fed token.
    pub fn logits(&self) -> &Array1<f64> {
        &self.logits
    }
}

impl ToyCheckpoint {
    pub fn start_decode(&self) -> DecodeState {
        let d = self.config.hidden_size;
        DecodeState {
            keys: vec![Array2::zeros((0, d)); self.blocks.len()],
            values: vec![Array2::zeros((0, d)); self.blocks.len()],
            len: 0,
            logits: Array1::zeros(self.config.vocab_size),
        }
    }

    /// Feeds one token, extending the key/value caches.
    pub fn decode_step(&self, state: &mut DecodeState, token: usize) -> Result<()> {
        let cfg = &self.config;
        if state.len >= cfg.max_seq {
            return Err(arg(format!("sequence would exceed max_seq {}", cfg.max_seq)));
        }
        if token >= cfg.vocab_size {
            return Err(arg(format!("token id {token} >= vocab_size {}", cfg.vocab_size)));
        }
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = (&self.embedding_table.row(token) + &self.positional_table.row(state.len)).insert_axis(Axis(0));
        for (i, b) in self.blocks.iter().enumerate() {
            let (h, _, _) = layer_norm_rows(&x, &b.norm);
            let q = h.dot(&b.wq);
            state.keys[i].push_row(h.dot(&b.wk).row(0)).expect("matching width");
            state.values[i].push_row(h.dot(&b.wv).row(0)).expect("matching width");
            let keys = &state.keys[i];
            let values = &state.values[i];
            let mut ctx = Array2::zeros((1, cfg.hidden_size));
            for head in 0..cfg.n_heads {
                let cols = s![.., head * hd..(head + 1) * hd];
                let mut scores = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
                let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                scores.mapv_inplace(|v| (v - max).exp());
                let sum = scores.sum();
                scores /= sum;
                ctx.slice_mut(cols).assign(&scores.dot(&values.slice(cols)));
            }
            let attn = ctx.dot(&b.wo) + &b.bo;
            let a = (h.dot(&b.w_in) + &b.b_in).mapv(gelu);
            let mlp = a.dot(&b.w_out) + &b.b_out;
            x = x + attn + mlp;
        }
        let (hf, _, _) = layer_norm_rows(&x, &self.final_norm);
        state.logits = hf.dot(&self.vocab_linear).row(0).to_owned();
        state.len += 1;
        Ok(())
    }

    pub fn decode_prompt(&self, tokens: &[usize]) -> Result<DecodeState> {
        self.check_tokens(tokens)?;
        let mut state = self.start_decode();
        for &t in tokens {
            self.decode_step(&mut state, t)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_config() -> ToyConfig {
        ToyConfig::new(11, 8, 3, 2, 12, 7)
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        assert_eq!(ToyCheckpoint::init_random(&cfg).unwrap(), ToyCheckpoint::init_random(&cfg).unwrap());
        let other = ToyConfig { seed: 8, ..cfg };
        assert_ne!(ToyCheckpoint::init_random(&cfg).unwrap(), ToyCheckpoint::init_random(&other).unwrap());
    }

    #[test]
    fn bad_head_count_rejected() {
        let cfg = ToyConfig::new(10, 64, 2, 5, 8, 0);
        assert!(ToyCheckpoint::init_random(&cfg).is_err());
        let zero = ToyConfig::new(10, 64, 0, 4, 8, 0);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn reference_shapes_are_finite() {
        let cfg = ToyConfig::new(50, 64, 12, 4, 16, 1);
        let ck = ToyCheckpoint::init_random(&cfg).unwrap();
        assert!(ck.is_finite());
        assert_eq!(ck.vocab_linear.dim(), (64, 50));
        assert_eq!(ck.blocks.len(), 12);
    }

    #[test]
    fn zero_blocks_pass_residual_through() {
        let cfg = ToyConfig::new(11, 8, 1, 2, 12, 3);
        let mut ck = ToyCheckpoint::init_random(&cfg).unwrap();
        ck.blocks[0] = BlockWeights::zeros(&cfg);
        let tokens = [1, 4, 2];
        let trace = forward_capture(&ck, &tokens).unwrap();
        assert_eq!(trace.layers.len(), 1);
        assert_eq!(trace.layers[0], trace.embedding);
        let x0 = Array2::from_shape_vec((1, 8), trace.embedding.clone()).unwrap();
        let (h, _, _) = layer_norm_rows(&x0, &ck.final_norm);
        let logits = h.dot(&ck.vocab_linear);
        for (a, b) in logits.iter().zip(&trace.logits) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn trace_has_one_entry_per_layer() {
        let ck = ToyCheckpoint::init_random(&small_config()).unwrap();
        let trace = forward_capture(&ck, &[0, 1, 2, 3]).unwrap();
        assert_eq!(trace.layers.len(), 3);
        assert_eq!(trace.logits.len(), 11);
    }

    #[test]
    fn residual_recurrence_is_exact() {
        let ck = ToyCheckpoint::init_random(&small_config()).unwrap();
        let (res, _) = forward_full(&ck, &[3, 1, 4, 1, 5]).unwrap();
        for i in 0..ck.n_layers() {
            let delta = ck.block_delta(i, &res[i]);
            let diff = &res[i + 1] - &res[i];
            let scale = res[i + 1].iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in diff.iter().zip(delta.iter()) {
                assert!((a - b).abs() <= 1e-5 * scale.max(1e-12));
            }
        }
    }

    #[test]
    fn doubled_output_projection_adds_one_block_delta() {
        let cfg = ToyConfig::new(11, 8, 1, 2, 12, 5);
        let ck = ToyCheckpoint::init_random(&cfg).unwrap();
        let mut doubled = ck.clone();
        doubled.blocks[0].scale_output(2.0);
        let tokens = [2, 7, 1];
        let (a, _) = forward_full(&ck, &tokens).unwrap();
        let (b, _) = forward_full(&doubled, &tokens).unwrap();
        let delta = ck.block_delta(0, &a[0]);
        let change = &b[1] - &a[1];
        for (c, d) in change.iter().zip(delta.iter()) {
            assert_abs_diff_eq!(c, d, epsilon = 1e-12);
        }
    }

    #[test]
    fn token_checks() {
        let ck = ToyCheckpoint::init_random(&small_config()).unwrap();
        assert!(forward_capture(&ck, &[11]).is_err());
        assert!(forward_capture(&ck, &[0; 13]).is_err());
        assert!(forward_capture(&ck, &[]).is_err());
    }

    #[test]
    fn incremental_matches_full_forward() {
        let ck = ToyCheckpoint::init_random(&small_config()).unwrap();
        let tokens = [1, 2, 3, 4, 5, 6];
        let (_, logits) = forward_full(&ck, &tokens).unwrap();
        let state = ck.decode_prompt(&tokens).unwrap();
        for (a, b) in state.logits().iter().zip(logits.row(5).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn delete_zero_block_preserves_logits() {
        let cfg = ToyConfig::new(11, 8, 3, 2, 12, 9);
        let mut ck = ToyCheckpoint::init_random(&cfg).unwrap();
        ck.blocks[1] = BlockWeights::zeros(&cfg);
        let cut = ck.delete_layer(1).unwrap();
        assert_eq!(cut.n_layers(), 2);
        assert_eq!(ck.n_layers(), 3);
        for tokens in [vec![0], vec![3, 9, 2], vec![10, 10, 1, 5, 7]] {
            let a = forward_capture(&ck, &tokens).unwrap().logits;
            let b = forward_capture(&cut, &tokens).unwrap().logits;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn delete_first_of_two_equals_single_block_model() {
        let cfg = ToyConfig::new(11, 8, 2, 2, 12, 10);
        let ck = ToyCheckpoint::init_random(&cfg).unwrap();
        let cut = ck.delete_layer(0).unwrap();
        let mut single = ck.clone();
        single.blocks = vec![ck.blocks[1].clone()];
        single.config.n_layers = 1;
        let tokens = [4, 2, 8];
        assert_eq!(forward_capture(&cut, &tokens).unwrap(), forward_capture(&single, &tokens).unwrap());
    }

    #[test]
    fn delete_layer_errors() {
        let ck = ToyCheckpoint::init_random(&small_config()).unwrap();
        assert!(ck.delete_layer(3).is_err());
        let one = ToyCheckpoint::init_random(&ToyConfig::new(11, 8, 1, 2, 12, 0)).unwrap();
        assert!(one.delete_layer(0).is_err());
    }
}
