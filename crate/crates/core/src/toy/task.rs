//! The synthetic single-choice task: `K` keys, each bound to one of `K`
//! values by a fixed seeded bijection.
//!
//! Pretraining text mixes three kinds of documents: plain facts
//! (`"k5 is v9."`), Template-A prompts continued with a raw ` yes`/` no`,
//! and "exam sheets" of two consecutive Template-B questions with no
//! answers. The model thus has to work out correctness during pretraining
//! but never sees the requested answer formats. Format-tuning teaches them:
//! Template-B → option text, and Template-A → ` correct`/` wrong`, while
//! replaying facts.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::TrainExample;
use super::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use crate::error::{arg, Result};
use crate::templates::{self, ChoiceQuestion, DIRECT_INSTRUCTION, MAGICAL_SUFFIX, N_CHOICES};

const TEMPLATE_A_HEAD: &str = "Consider the correctness of the answer to the following question.";
const TEMPLATE_A_TAIL: &str = " Directly answer correct or wrong:";
const QUESTION_STEM: &str = "Which value matches key";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_keys: usize,
    /// Seed of the key → value bijection.
    pub seed: u64,
    /// Pretraining mix: facts, judgments, exam sheets (normalized).
    pub pretrain_mix: [f64; 3],
    /// Format-tuning mix: answered questions, facts, formatted judgments.
    pub format_mix: [f64; 3],
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_keys: 12,
            seed: 0,
            pretrain_mix: [0.2, 0.6, 0.2],
            format_mix: [0.5, 0.2, 0.3],
        }
    }
}

/// Which kind of document to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPhase {
    Pretrain,
    Format,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    tokenizer: Tokenizer,
    values: Vec<usize>,
}

fn pick(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    2
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        if spec.n_keys < N_CHOICES {
            return Err(arg(format!("need at least {N_CHOICES} keys, got {}", spec.n_keys)));
        }
        for mix in [spec.pretrain_mix, spec.format_mix] {
            if mix.iter().any(|w| !(*w >= 0.0)) || mix.iter().sum::<f64>() <= 0.0 {
                return Err(arg("mixture weights must be non-negative with a positive sum"));
            }
        }
        let mut pieces: Vec<String> = [
            TEMPLATE_A_HEAD,
            " Question:",
            QUESTION_STEM,
            " Which value matches key",
            " ",
            "?",
            ",",
            ".",
            " Answer:",
            TEMPLATE_A_TAIL,
            " correct",
            " wrong",
            " yes",
            " no",
            " is",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        for n in 1..=N_CHOICES {
            pieces.push(format!("{n}."));
            pieces.push(format!(" {n}."));
        }
        pieces.push(format!(" {DIRECT_INSTRUCTION}"));
        pieces.push(format!(" {MAGICAL_SUFFIX}"));
        pieces.push("\n".into());
        pieces.push("\n\n".into());
        for i in 0..spec.n_keys {
            pieces.push(format!("k{i}"));
            pieces.push(format!("v{i}"));
        }
        let tokenizer = Tokenizer::new(pieces)?;
        let mut values: Vec<usize> = (0..spec.n_keys).collect();
        values.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        Ok(Self { spec, tokenizer, values })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn value_of(&self, key: usize) -> usize {
        self.values[key]
    }

    pub fn fact_text(&self, key: usize) -> String {
        format!("k{key} is v{}.", self.value_of(key))
    }

    /// A question about `key` with three distinct distractor values in a
    /// random order.
    pub fn question(&self, id: impl Into<String>, key: usize, rng: &mut ChaCha8Rng) -> ChoiceQuestion {
        let answer = self.value_of(key);
        let others: Vec<usize> = (0..self.spec.n_keys).filter(|&v| v != answer).collect();
        let mut vals: Vec<usize> = index::sample(rng, others.len(), N_CHOICES - 1)
            .into_iter()
            .map(|i| others[i])
            .collect();
        let correct_index = rng.random_range(0..N_CHOICES);
        vals.insert(correct_index, answer);
        let choices = vals.iter().map(|v| format!("v{v}")).collect();
        ChoiceQuestion::new(id, format!("{QUESTION_STEM} k{key}?"), choices, correct_index)
            .expect("four choices and an in-range index")
    }

    /// `n` questions with uniformly drawn keys, ids `{prefix}{i}`.
    pub fn questions(&self, n: usize, seed: u64, prefix: &str) -> Vec<ChoiceQuestion> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let key = rng.random_range(0..self.spec.n_keys);
                self.question(format!("{prefix}{i}"), key, &mut rng)
            })
            .collect()
    }

    /// The format-tuning answer: the correct option's text.
    pub fn answer_text(q: &ChoiceQuestion) -> &str {
        &q.choices[q.correct_index]
    }

    /// `<bos>` followed by the encoded text.
    pub fn encode_prompt(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.tokenizer.encode(text));
        ids
    }

    fn lm_document(&self, text: &str) -> TrainExample {
        let mut tokens = self.encode_prompt(text);
        tokens.push(EOS_ID);
        let mut targets: Vec<Option<usize>> = tokens[1..].iter().copied().map(Some).collect();
        tokens.pop();
        targets.truncate(tokens.len());
        TrainExample { tokens, targets }
    }

    /// Prompt tokens followed by a continuation; only the continuation
    /// (and the closing `<eos>`) carries loss.
    fn completion(&self, prompt: &str, continuation: &str) -> TrainExample {
        let prompt_ids = self.encode_prompt(prompt);
        let mut all = prompt_ids.clone();
        all.extend(self.tokenizer.encode(continuation));
        all.push(EOS_ID);
        let tokens = all[..all.len() - 1].to_vec();
        let targets = (0..tokens.len())
            .map(|t| (t + 1 >= prompt_ids.len()).then(|| all[t + 1]))
            .collect();
        TrainExample { tokens, targets }
    }

    /// A Template-A prompt for a random question, half the time pairing it
    /// with the correct option, and whether it does.
    fn random_judgment(&self, rng: &mut ChaCha8Rng) -> (String, bool) {
        let key = rng.random_range(0..self.spec.n_keys);
        let q = self.question("j", key, rng);
        let choice = if rng.random::<bool>() {
            q.correct_index
        } else {
            (q.correct_index + rng.random_range(1..N_CHOICES)) % N_CHOICES
        };
        let prompt = templates::wrap_template_a(&q, choice).expect("index in range");
        (prompt, choice == q.correct_index)
    }

    /// The format-tuning verdict for a Template-A prompt.
    pub fn verdict_text(correct: bool) -> &'static str {
        if correct {
            " correct"
        } else {
            " wrong"
        }
    }

    pub fn example(&self, phase: TaskPhase, rng: &mut ChaCha8Rng) -> TrainExample {
        let n = self.spec.n_keys;
        match phase {
            TaskPhase::Pretrain => match pick(&self.spec.pretrain_mix, rng) {
                0 => self.lm_document(&self.fact_text(rng.random_range(0..n))),
                1 => {
                    let (prompt, ok) = self.random_judgment(rng);
                    self.lm_document(&format!("{prompt}{}", if ok { " yes" } else { " no" }))
                }
                _ => {
                    let a = self.question("a", rng.random_range(0..n), rng);
                    let b = self.question("b", rng.random_range(0..n), rng);
                    self.lm_document(&format!(
                        "{}\n\n{}",
                        templates::wrap_template_b(&a),
                        templates::wrap_template_b(&b)
                    ))
                }
            },
            TaskPhase::Format => match pick(&self.spec.format_mix, rng) {
                0 => {
                    let q = self.question("s", rng.random_range(0..n), rng);
                    self.completion(&templates::wrap_template_b(&q), Self::answer_text(&q))
                }
                1 => self.lm_document(&self.fact_text(rng.random_range(0..n))),
                _ => {
                    let (prompt, ok) = self.random_judgment(rng);
                    self.completion(&prompt, Self::verdict_text(ok))
                }
            },
        }
    }

    /// Longest sequence any document or evaluation prompt can need
    /// (two-shot prompt plus magical suffix plus answer).
    pub fn max_prompt_tokens(&self) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = self.question("m", 0, &mut rng);
        let ex = templates::Exemplar::from_question(&q);
        let few = templates::prepend_few_shot(&templates::wrap_template_b(&q), &[ex.clone(), ex]).expect("non-empty");
        let magical = templates::append_magical(&few);
        self.encode_prompt(&magical).len() + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(SyntheticTaskSpec::default()).unwrap()
    }

    #[test]
    fn bijection_and_questions() {
        let t = task();
        let n = t.spec().n_keys;
        let mut seen: Vec<usize> = (0..n).map(|k| t.value_of(k)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let qs = t.questions(50, 1, "q");
        for q in &qs {
            let key: usize = q.question.trim_start_matches("Which value matches key k").trim_end_matches('?').parse().unwrap();
            assert_eq!(q.choices[q.correct_index], format!("v{}", t.value_of(key)));
            let mut c = q.choices.to_vec();
            c.dedup();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), 4);
        }
        assert_eq!(qs, t.questions(50, 1, "q"));
    }

    #[test]
    fn templates_tokenize_without_unknowns() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = t.question("x", 7, &mut rng);
        let texts = [
            templates::wrap_template_a(&q, 2).unwrap() + " wrong",
            templates::wrap_template_a(&q, 1).unwrap() + " no",
            templates::wrap_template_b(&q),
            templates::append_magical(&templates::wrap_template_b(&q)),
            templates::prepend_few_shot(&templates::wrap_template_b(&q), &[templates::Exemplar::from_question(&q)]).unwrap(),
            t.fact_text(3),
        ];
        for text in texts {
            let ids = t.tokenizer().encode(&text);
            assert!(!ids.contains(&super::super::tokenizer::UNK_ID), "{text}");
            assert_eq!(t.tokenizer().decode(&ids), text);
        }
        assert!(t.max_prompt_tokens() < 96, "{}", t.max_prompt_tokens());
    }

    #[test]
    fn completion_targets_cover_only_the_answer() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = t.question("x", 2, &mut rng);
        let ex = t.completion(&templates::wrap_template_b(&q), SyntheticTask::answer_text(&q));
        let labelled: Vec<usize> = ex.targets.iter().flatten().copied().collect();
        assert_eq!(labelled, vec![t.tokenizer().id(&q.choices[q.correct_index]).unwrap(), EOS_ID]);
        let doc = t.lm_document(&t.fact_text(0));
        assert_eq!(doc.tokens.len(), doc.targets.len());
        assert_eq!(*doc.targets.last().unwrap(), Some(EOS_ID));
        assert!(doc.targets.iter().all(Option::is_some));
    }

    #[test]
    fn verdict_format_appears_only_in_format_tuning() {
        let t = task();
        let verdicts = [t.tokenizer().id(" correct").unwrap(), t.tokenizer().id(" wrong").unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let count = |phase, rng: &mut ChaCha8Rng| {
            (0..500)
                .map(|_| t.example(phase, rng))
                .filter(|e| e.targets.iter().flatten().any(|id| verdicts.contains(id)))
                .count()
        };
        assert_eq!(count(TaskPhase::Pretrain, &mut rng), 0);
        assert!(count(TaskPhase::Format, &mut rng) > 50);
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(SyntheticTask::new(SyntheticTaskSpec { n_keys: 3, ..Default::default() }).is_err());
        assert!(SyntheticTask::new(SyntheticTaskSpec { pretrain_mix: [0.0; 3], ..Default::default() }).is_err());
    }
}
