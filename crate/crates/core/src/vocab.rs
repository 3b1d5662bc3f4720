//! How much the vocabulary projection moves between checkpoints: fixed
//! reference embeddings are pushed through each checkpoint's vocabulary
//! layer and consecutive output distributions are compared by KL
//! divergence per million training tokens.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::exec::Exec;
use crate::store::ActivationDump;
use crate::toy::ToyCheckpoint;

pub const VOCAB_MAGIC: [u8; 4] = *b"VOCB";
pub const VOCAB_VERSION: u32 = 1;
/// Floor applied to `q` inside the KL log ratio.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayer {
    /// `hidden_size × vocab_size`
    pub weights: Array2<f64>,
    pub model_id: String,
    pub training_tokens: u64,
}

impl VocabLayer {
    pub fn new(weights: Array2<f64>, model_id: impl Into<String>, training_tokens: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(arg("vocabulary layer is empty"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(arg("vocabulary layer has non-finite weights"));
        }
        Ok(Self {
            weights,
            model_id: model_id.into(),
            training_tokens,
        })
    }

    pub fn from_checkpoint(ckpt: &ToyCheckpoint, model_id: impl Into<String>) -> Self {
        Self {
            weights: ckpt.vocab_linear.clone(),
            model_id: model_id.into(),
            training_tokens: ckpt.meta.training_tokens,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.ncols()
    }
}

/// Per-prompt reference vectors `c̄₋₁(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEmbeddings {
    pub prompts: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

/// Componentwise mean over models of each prompt's final-layer vector.
pub fn mean_final_embedding(dumps: &[ActivationDump]) -> Result<ReferenceEmbeddings> {
    let first = dumps.first().ok_or_else(|| arg("need at least one dump"))?;
    for (i, d) in dumps.iter().enumerate() {
        if d.hidden_size != first.hidden_size {
            return Err(arg(format!(
                "dump {i}: hidden_size {} != {}",
                d.hidden_size, first.hidden_size
            )));
        }
        if d.group_ids != first.group_ids {
            return Err(arg(format!("dump {i}: prompt ids differ from dump 0")));
        }
        if d.n_layers == 0 {
            return Err(arg(format!("dump {i} has no layers")));
        }
    }
    let n = dumps.len() as f64;
    let vectors = (0..first.n_examples)
        .map(|e| {
            let mut acc = vec![0.0; first.hidden_size];
            for d in dumps {
                for (a, &x) in acc.iter_mut().zip(d.vector(e, d.n_layers - 1)) {
                    *a += x as f64;
                }
            }
            acc.iter().map(|a| a / n).collect()
        })
        .collect();
    Ok(ReferenceEmbeddings {
        prompts: first.group_ids.clone(),
        vectors,
    })
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let s = p.sum();
    p /= s;
    p
}

/// `softmax(ref · W)`.
pub fn vocab_distribution(reference: &[f64], layer: &VocabLayer) -> Result<Array1<f64>> {
    if reference.len() != layer.hidden_size() {
        return Err(arg(format!(
            "reference dimension {} != vocab layer hidden size {}",
            reference.len(),
            layer.hidden_size()
        )));
    }
    let logits = ArrayView1::from(reference).dot(&layer.weights);
    Ok(softmax(logits.view()))
}

/// `KL(p‖q)` with the floor on `q`; also reports whether the floor bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kl {
    pub value: f64,
    pub floored: bool,
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<Kl> {
    if p.len() != q.len() {
        return Err(arg(format!("distribution lengths differ: {} vs {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|&x| !(x >= 0.0)) {
            return Err(arg(format!("{name} is not a probability vector (sum {s})")));
        }
    }
    let mut value = 0.0;
    let mut floored = false;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi < KL_FLOOR {
            floored = true;
        }
        value += pi * (pi / qi.max(KL_FLOOR)).ln();
    }
    Ok(Kl {
        value: value.max(0.0),
        floored,
    })
}

/// One adjacent-checkpoint interval of a KL series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlInterval {
    pub from_model: String,
    pub to_model: String,
    pub from_tokens: u64,
    pub to_tokens: u64,
    /// Mean over prompts of `KL(earlier‖later)` (or the symmetrized sum).
    pub mean_kl: f64,
    pub kl_per_million: f64,
    pub floored: bool,
}

/// Per adjacent pair: mean KL over reference prompts divided by the token
/// increment in millions. `symmetric` uses `KL(a‖b) + KL(b‖a)`.
pub fn kl_series(models: &[VocabLayer], reference: &ReferenceEmbeddings, symmetric: bool, exec: Exec) -> Result<Vec<KlInterval>> {
    if models.len() < 2 {
        return Err(arg("need at least two vocab layers"));
    }
    if reference.vectors.is_empty() {
        return Err(arg("no reference embeddings"));
    }
    for w in models.windows(2) {
        if w[1].training_tokens <= w[0].training_tokens {
            return Err(arg(format!(
                "token counts must strictly increase ({} then {})",
                w[0].training_tokens, w[1].training_tokens
            )));
        }
    }
    let dists = exec.map_slice(models, |m| {
        reference
            .vectors
            .iter()
            .map(|r| vocab_distribution(r, m).map(|a| a.to_vec()))
            .collect::<Result<Vec<_>>>()
    });
    let dists = dists.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(models.len() - 1);
    for j in 0..models.len() - 1 {
        let mut total = 0.0;
        let mut floored = false;
        for (p, q) in dists[j].iter().zip(&dists[j + 1]) {
            let a = kl_divergence(p, q)?;
            floored |= a.floored;
            total += a.value;
            if symmetric {
                let b = kl_divergence(q, p)?;
                floored |= b.floored;
                total += b.value;
            }
        }
        let mean_kl = total / reference.vectors.len() as f64;
        let delta = (models[j + 1].training_tokens - models[j].training_tokens) as f64 / 1e6;
        out.push(KlInterval {
            from_model: models[j].model_id.clone(),
            to_model: models[j + 1].model_id.clone(),
            from_tokens: models[j].training_tokens,
            to_tokens: models[j + 1].training_tokens,
            mean_kl,
            kl_per_million: mean_kl / delta,
            floored,
        });
    }
    Ok(out)
}

// VOCB: magic, u32 version, u32 hidden, u32 vocab, u64 training_tokens,
// u32 id length + UTF-8 id, then hidden × vocab little-endian f32 row-major.

pub fn write_vocab_layer(layer: &VocabLayer, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(&VOCAB_MAGIC)?;
    for v in [VOCAB_VERSION, layer.hidden_size() as u32, layer.vocab_size() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&layer.training_tokens.to_le_bytes())?;
    out.write_all(&(layer.model_id.len() as u32).to_le_bytes())?;
    out.write_all(layer.model_id.as_bytes())?;
    for &v in &layer.weights {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_vocab_layer(path: impl AsRef<Path>) -> Result<VocabLayer> {
    let path = path.as_ref();
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let actual = bytes.len() as u64;
    let truncated = |expected: u64| Error::Truncation {
        path: path.to_path_buf(),
        expected,
        actual,
    };
    if bytes.len() < 4 || bytes[..4] != VOCAB_MAGIC {
        return Err(bad("bad magic (expected VOCB)".into()));
    }
    const FIXED: usize = 4 + 4 * 3 + 8 + 4;
    if bytes.len() < FIXED {
        return Err(truncated(FIXED as u64));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VOCAB_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: VOCAB_VERSION,
        });
    }
    let (hidden, vocab) = (u32_at(8) as u64, u32_at(12) as u64);
    let tokens = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let id_len = u32_at(24) as u64;
    let expected = FIXED as u64 + id_len + 4 * hidden * vocab;
    if actual != expected {
        return Err(truncated(expected));
    }
    let id_end = FIXED + id_len as usize;
    let model_id = String::from_utf8(bytes[FIXED..id_end].to_vec()).map_err(|e| bad(format!("model id: {e}")))?;
    let values: Vec<f64> = bytes[id_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let weights = Array2::from_shape_vec((hidden as usize, vocab as usize), values).map_err(|e| bad(e.to_string()))?;
    VocabLayer::new(weights, model_id, tokens).map_err(|e| bad(e.to_string()))
}
