use super::decode::sample_decode;
use super::model::{forward_capture, forward_full, ForwardTrace, ToyCheckpoint};
use super::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use crate::error::{arg, Result};
use crate::expression::{GenerationRequest, ModelInterface, OptionScore};

/// A checkpoint paired with its tokenizer, usable wherever a
/// [`ModelInterface`] is expected.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub checkpoint: ToyCheckpoint,
    pub tokenizer: Tokenizer,
}

impl ToyModel {
    pub fn new(checkpoint: ToyCheckpoint, tokenizer: Tokenizer) -> Result<Self> {
        if checkpoint.config.vocab_size != tokenizer.vocab_size() {
            return Err(arg(format!(
                "checkpoint vocab_size {} but tokenizer has {} pieces",
                checkpoint.config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Self { checkpoint, tokenizer })
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.tokenizer.encode(text));
        ids
    }

    /// Last-token residual states of `prompt` (with `<bos>`).
    pub fn capture(&self, prompt: &str) -> Result<ForwardTrace> {
        forward_capture(&self.checkpoint, &self.encode(prompt))
    }
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

impl ModelInterface for ToyModel {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String> {
        let prompt = self.encode(request.prompt);
        let out = sample_decode(&self.checkpoint, &prompt, request.params, Some(EOS_ID))?;
        Ok(self.tokenizer.decode(&out))
    }

    fn option_logprob(&self, prompt: &str, option: &str) -> Result<OptionScore> {
        let mut ids = self.encode(prompt);
        let start = ids.len();
        let opt = self.tokenizer.encode(option);
        if opt.is_empty() {
            return Err(arg("empty option"));
        }
        ids.extend(&opt);
        let (_, logits) = forward_full(&self.checkpoint, &ids)?;
        let logprob = (start..ids.len()).map(|t| log_softmax_at(logits.row(t - 1), ids[t])).sum();
        Ok(OptionScore {
            logprob,
            n_tokens: opt.len(),
        })
    }
}
