//! Expressive capability: what a model *says* when asked directly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::exec::Exec;
use crate::templates::{self, ChoiceQuestion, Exemplar, N_CHOICES};

/// Sampling hyperparameters for direct generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    pub repetition_penalty: f64,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.2,
            top_p: 0.9,
            top_k: 50,
            max_tokens: 2048,
            repetition_penalty: 1.05,
            seed: 0,
        }
    }
}

impl GenerationParams {
    /// Deterministic argmax decoding.
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 1,
            max_tokens,
            repetition_penalty: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(arg(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(arg(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(arg("top_k must be at least 1"));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(arg(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }

    fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `sample_idx` for one question. Independent of evaluation
/// order, so concurrency cannot change results, and sample `j` is the same
/// whatever the total number of samples drawn.
pub fn derive_seed(base: u64, question_id: &str, sample_idx: usize) -> u64 {
    // FNV-1a over the id
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in question_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    splitmix(splitmix(base ^ h) ^ sample_idx as u64)
}

/// One generation call as seen by a model.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub question_id: &'a str,
    pub sample_idx: usize,
    pub prompt: &'a str,
    /// Carries the per-sample derived seed.
    pub params: &'a GenerationParams,
}

/// Sum of token log-probabilities of an option continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionScore {
    pub logprob: f64,
    pub n_tokens: usize,
}

/// Anything that can answer prompts and, optionally, score continuations.
pub trait ModelInterface: Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String>;

    fn option_logprob(&self, prompt: &str, option: &str) -> Result<OptionScore>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub raw_output: String,
    pub parsed_index: Option<usize>,
    pub correct: bool,
}

impl AnswerRecord {
    fn new(q: &ChoiceQuestion, raw_output: String, parsed_index: Option<usize>) -> Self {
        Self {
            question_id: q.id.clone(),
            correct: parsed_index == Some(q.correct_index),
            raw_output,
            parsed_index,
        }
    }
}

fn normalize(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Maps a raw output to a choice index: a leading label (`1.`–`4.` or
/// `A.`–`D.`) wins; otherwise the output must mention exactly one choice's
/// normalized text as whole words. A match contained in another matched
/// choice's text does not count separately.
pub fn parse_choice(raw: &str, q: &ChoiceQuestion) -> Option<usize> {
    let mut chars = raw.trim_start().chars();
    if let (Some(c), Some('.')) = (chars.next(), chars.next()) {
        match c {
            '1'..='4' => return Some(c as usize - '1' as usize),
            'A'..='D' => return Some(c as usize - 'A' as usize),
            _ => {}
        }
    }
    let out = normalize(raw);
    let texts: Vec<String> = q.choices.iter().map(|c| normalize(c)).collect();
    let matched: Vec<usize> = (0..N_CHOICES)
        .filter(|&i| !texts[i].is_empty() && contains_words(&out, &texts[i]))
        .collect();
    let maximal: Vec<usize> = matched
        .iter()
        .copied()
        .filter(|&i| {
            !matched
                .iter()
                .any(|&j| texts[j] != texts[i] && contains_words(&texts[j], &texts[i]))
        })
        .collect();
    match maximal.as_slice() {
        [only] => Some(*only),
        // identical choice texts cannot be told apart
        _ => None,
    }
}

/// Reads a Template-A verdict: `Some(true)` for "correct", `Some(false)`
/// for "wrong", judged by the first of the two words to appear.
pub fn parse_verdict(raw: &str) -> Option<bool> {
    normalize(raw).split(' ').find_map(|w| match w {
        "correct" => Some(true),
        "wrong" => Some(false),
        _ => None,
    })
}

/// One generated verdict on a `(question, choice)` row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub question_id: String,
    pub choice_index: usize,
    pub raw_output: String,
    pub verdict: Option<bool>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerdictResult {
    /// Fraction of rows whose verdict matches the row label; unparsed
    /// verdicts count as misses.
    pub accuracy: f64,
    pub records: Vec<VerdictRecord>,
}

/// Direct token generation as a binary classifier over the four
/// Template-A rows of every question: the same rows a hidden-space
/// classifier sees in a pair-mode dump.
pub fn eval_verdicts(model: &dyn ModelInterface, questions: &[ChoiceQuestion], params: &GenerationParams, exec: Exec) -> Result<VerdictResult> {
    check_questions(questions)?;
    params.validate()?;
    let rows: Vec<(&ChoiceQuestion, usize)> = questions.iter().flat_map(|q| (0..N_CHOICES).map(move |i| (q, i))).collect();
    let outcomes = exec.map_slice(&rows, |&(q, i)| {
        let prompt = templates::wrap_template_a(q, i)?;
        let row_id = format!("{}#{i}", q.id);
        let p = params.with_seed(derive_seed(params.seed, &row_id, 0));
        model.generate(&GenerationRequest {
            question_id: &q.id,
            sample_idx: 0,
            prompt: &prompt,
            params: &p,
        })
    });
    let mut failures = 0;
    let records: Vec<VerdictRecord> = outcomes
        .into_iter()
        .zip(&rows)
        .map(|(o, &(q, i))| {
            let raw_output = o.unwrap_or_else(|_| {
                failures += 1;
                String::new()
            });
            let verdict = parse_verdict(&raw_output);
            VerdictRecord {
                question_id: q.id.clone(),
                choice_index: i,
                correct: verdict == Some(i == q.correct_index),
                raw_output,
                verdict,
            }
        })
        .collect();
    if failures == rows.len() {
        return Err(Error::Evaluation(format!("all {failures} generations failed")));
    }
    let hits = records.iter().filter(|r| r.correct).count();
    Ok(VerdictResult {
        accuracy: hits as f64 / records.len() as f64,
        records,
    })
}

/// How the Template-B prompt is dressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptMode {
    ZeroShot,
    FewShot(Vec<Exemplar>),
    Magical,
}

impl PromptMode {
    pub fn few_shot_reference() -> Self {
        PromptMode::FewShot(templates::reference_exemplars().to_vec())
    }

    pub fn name(&self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::FewShot(_) => "few_shot",
            PromptMode::Magical => "magical",
        }
    }

    pub fn prompt(&self, q: &ChoiceQuestion) -> Result<String> {
        let base = templates::wrap_template_b(q);
        match self {
            PromptMode::ZeroShot => Ok(base),
            PromptMode::FewShot(ex) => templates::prepend_few_shot(&base, ex),
            PromptMode::Magical => Ok(templates::append_magical(&base)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressiveResult {
    pub accuracy: f64,
    pub records: Vec<AnswerRecord>,
}

fn check_questions(questions: &[ChoiceQuestion]) -> Result<()> {
    if questions.is_empty() {
        return Err(arg("no questions to evaluate"));
    }
    Ok(())
}

/// Generates one answer per question and scores it. Item-level failures
/// become unparsed records; the run fails only when every item fails.
pub fn eval_expressive(
    model: &dyn ModelInterface,
    questions: &[ChoiceQuestion],
    params: &GenerationParams,
    mode: &PromptMode,
    exec: Exec,
) -> Result<ExpressiveResult> {
    check_questions(questions)?;
    params.validate()?;
    let outcomes = exec.map_slice(questions, |q| sample_once(model, q, params, mode, 0));
    let mut failures = 0;
    let records: Vec<AnswerRecord> = outcomes
        .into_iter()
        .zip(questions)
        .map(|(o, q)| match o {
            Ok(raw) => {
                let parsed = parse_choice(&raw, q);
                AnswerRecord::new(q, raw, parsed)
            }
            Err(_) => {
                failures += 1;
                AnswerRecord::new(q, String::new(), None)
            }
        })
        .collect();
    if failures == questions.len() {
        return Err(Error::Evaluation(format!("all {failures} generations failed")));
    }
    Ok(ExpressiveResult {
        accuracy: accuracy(&records),
        records,
    })
}

fn sample_once(model: &dyn ModelInterface, q: &ChoiceQuestion, params: &GenerationParams, mode: &PromptMode, sample_idx: usize) -> Result<String> {
    let prompt = mode.prompt(q)?;
    let p = params.with_seed(derive_seed(params.seed, &q.id, sample_idx));
    model.generate(&GenerationRequest {
        question_id: &q.id,
        sample_idx,
        prompt: &prompt,
        params: &p,
    })
}

pub fn accuracy(records: &[AnswerRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

/// Accuracy with `1..=k` samples per question (zero-shot prompts); entry
/// `j` counts a question as solved if any of its first `j + 1` samples is
/// correct. Sample 0 is the one [`eval_expressive`] draws.
pub fn eval_repeated_curve(
    model: &dyn ModelInterface,
    questions: &[ChoiceQuestion],
    params: &GenerationParams,
    k: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    check_questions(questions)?;
    params.validate()?;
    if k == 0 {
        return Err(arg("k must be at least 1"));
    }
    let mode = PromptMode::ZeroShot;
    // per question: index of the first correct sample, and failure count
    let firsts = exec.map_slice(questions, |q| {
        let mut failed = 0;
        for j in 0..k {
            match sample_once(model, q, params, &mode, j) {
                Ok(raw) if parse_choice(&raw, q) == Some(q.correct_index) => return (Some(j), failed),
                Ok(_) => {}
                Err(_) => failed += 1,
            }
        }
        (None, failed)
    });
    let total_failed: usize = firsts.iter().map(|f| f.1).sum();
    if total_failed == questions.len() * k {
        return Err(Error::Evaluation("every sample failed".into()));
    }
    let n = questions.len() as f64;
    Ok((0..k)
        .map(|j| firsts.iter().filter(|f| f.0.is_some_and(|first| first <= j)).count() as f64 / n)
        .collect())
}

/// Any-of-`k` accuracy (default `k` is 8).
pub fn eval_repeated(
    model: &dyn ModelInterface,
    questions: &[ChoiceQuestion],
    params: &GenerationParams,
    k: usize,
    exec: Exec,
) -> Result<f64> {
    Ok(*eval_repeated_curve(model, questions, params, k, exec)?
        .last()
        .expect("k >= 1"))
}

pub const DEFAULT_REPEATS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScoring {
    /// Sum of token log-probabilities of the whole option.
    #[default]
    Sum,
    /// Sum divided by the option's token count.
    PerToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Picks, per question, the option whose continuation of the Template-B
/// prompt is most likely. Ties go to the lower index.
pub fn eval_likelihood_ranking(
    model: &dyn ModelInterface,
    questions: &[ChoiceQuestion],
    scoring: LikelihoodScoring,
    exec: Exec,
) -> Result<LikelihoodResult> {
    check_questions(questions)?;
    let preds = exec.map_slice(questions, |q| {
        let prompt = templates::wrap_template_b(q);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in q.choices.iter().enumerate() {
            let s = model.option_logprob(&prompt, c)?;
            let score = match scoring {
                LikelihoodScoring::Sum => s.logprob,
                LikelihoodScoring::PerToken => s.logprob / s.n_tokens.max(1) as f64,
            };
            if score.is_nan() {
                return Err(Error::Evaluation(format!("NaN score for question '{}'", q.id)));
            }
            if score > best.1 {
                best = (i, score);
            }
        }
        Ok(best.0)
    });
    let predictions = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let hits = predictions
        .iter()
        .zip(questions)
        .filter(|(p, q)| **p == q.correct_index)
        .count();
    Ok(LikelihoodResult {
        accuracy: hits as f64 / questions.len() as f64,
        predictions,
    })
}

/// Replays recorded outputs of an external model, keyed by question id and
/// sample index. Cannot score likelihoods.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranscriptModel {
    outputs: HashMap<(String, usize), String>,
}

impl TranscriptModel {
    /// Parses `question_id<TAB>sample_idx<TAB>raw_output` lines (fields
    /// escaped as in question files); blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut outputs = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = |m: String| arg(format!("transcript line {}: {m}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, idx, raw] = fields[..] else {
                return Err(at(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let id = templates::unescape_field(id).map_err(|e| at(e.to_string()))?;
            let idx: usize = idx.parse().map_err(|e| at(format!("sample_idx: {e}")))?;
            let raw = templates::unescape_field(raw).map_err(|e| at(e.to_string()))?;
            if outputs.insert((id.clone(), idx), raw).is_some() {
                return Err(at(format!("duplicate record for ({id}, {idx})")));
            }
        }
        Ok(Self { outputs })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

pub fn format_transcript<'a>(records: impl IntoIterator<Item = (&'a str, usize, &'a str)>) -> String {
    let mut out = String::new();
    for (id, idx, raw) in records {
        out.push_str(&format!(
            "{}\t{idx}\t{}\n",
            templates::escape_field(id),
            templates::escape_field(raw)
        ));
    }
    out
}

impl ModelInterface for TranscriptModel {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String> {
        self.outputs
            .get(&(request.question_id.to_string(), request.sample_idx))
            .cloned()
            .ok_or_else(|| {
                Error::Evaluation(format!(
                    "no transcript for question '{}' sample {}",
                    request.question_id, request.sample_idx
                ))
            })
    }

    fn option_logprob(&self, _prompt: &str, _option: &str) -> Result<OptionScore> {
        Err(Error::Evaluation("transcripts carry no option likelihoods".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case_study() -> ChoiceQuestion {
        ChoiceQuestion::new(
            "case",
            "Which technology was developed most recently?",
            ["cellular telephone", "television", "refrigerator", "airplane"].map(String::from).to_vec(),
            0,
        )
        .unwrap()
    }

    fn synthetic(n: usize, correct: impl Fn(usize) -> usize) -> Vec<ChoiceQuestion> {
        (0..n)
            .map(|i| {
                ChoiceQuestion::new(
                    format!("q{i}"),
                    format!("Question number {i}?"),
                    ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec(),
                    correct(i),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn defaults_and_validation() {
        let p = GenerationParams::default();
        assert_eq!((p.temperature, p.top_p, p.top_k, p.max_tokens, p.repetition_penalty), (1.2, 0.9, 50, 2048, 1.05));
        p.validate().unwrap();
        for bad in [
            GenerationParams { temperature: 0.0, ..p },
            GenerationParams { top_p: 0.0, ..p },
            GenerationParams { top_p: 1.1, ..p },
            GenerationParams { top_k: 0, ..p },
            GenerationParams { repetition_penalty: 0.9, ..p },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn parse_case_study_answer() {
        let q = case_study();
        assert_eq!(parse_choice("A. cellular telephone", &q), Some(0));
        assert_eq!(parse_choice("  3. whatever", &q), Some(2));
        assert_eq!(parse_choice("I would say the airplane, clearly.", &q), Some(3));
        assert_eq!(parse_choice("None of these apply.", &q), None);
        assert_eq!(parse_choice("", &q), None);
    }

    #[test]
    fn parse_ambiguous_mentions() {
        let q = case_study();
        // the SFT-epoch3 style answer names several options
        let prose = "television was introduced first and then refrigerators, followed by cellular phones; the airplane would be correct";
        assert_eq!(parse_choice(prose, &q), None);
        assert_eq!(parse_choice("refrigerators and cellular phones, then the airplane", &q), Some(3));
        assert_eq!(parse_choice("either television or airplane", &q), None);
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict(" correct"), Some(true));
        assert_eq!(parse_verdict("Wrong."), Some(false));
        assert_eq!(parse_verdict("it is wrong, not correct"), Some(false));
        assert_eq!(parse_verdict(" yes"), None);
        assert_eq!(parse_verdict("incorrect"), None);

        // says "correct" exactly when the row's answer text is "beta"
        struct Judge;
        impl ModelInterface for Judge {
            fn generate(&self, r: &GenerationRequest<'_>) -> Result<String> {
                if r.prompt.contains("Question number 3?") {
                    return Err(Error::Evaluation("boom".into()));
                }
                Ok(if r.prompt.contains("Answer: beta.") { " correct" } else { " wrong" }.into())
            }
            fn option_logprob(&self, _: &str, _: &str) -> Result<OptionScore> {
                unreachable!()
            }
        }
        let qs = synthetic(4, |i| if i < 2 { 1 } else { 0 });
        let r = eval_verdicts(&Judge, &qs, &GenerationParams::greedy(4), Exec::Parallel).unwrap();
        assert_eq!(r.records.len(), 16);
        // q0, q1 perfect; q2 misses rows 0 and 1; q3 fails to generate
        assert_eq!(r.accuracy, 10.0 / 16.0);
        assert!(r.records[12..].iter().all(|x| x.verdict.is_none()));
    }

    #[test]
    fn parse_prefers_longest_overlapping_choice() {
        let q = ChoiceQuestion::new(
            "m",
            "Which type of food?",
            ["meat", "meat and blood", "blood, skin and meat", "milk"].map(String::from).to_vec(),
            1,
        )
        .unwrap();
        assert_eq!(parse_choice("meat and blood", &q), Some(1));
        assert_eq!(parse_choice("just meat", &q), Some(0));
        assert_eq!(parse_choice("v1", &ChoiceQuestion::new("v", "k?", ["v1", "v12", "v2", "v3"].map(String::from).to_vec(), 0).unwrap()), Some(0));
        assert_eq!(parse_choice("v12", &ChoiceQuestion::new("v", "k?", ["v1", "v12", "v2", "v3"].map(String::from).to_vec(), 0).unwrap()), Some(1));
    }

    proptest! {
        #[test]
        fn parse_never_out_of_range(raw in ".{0,60}") {
            let q = case_study();
            let a = parse_choice(&raw, &q);
            prop_assert!(a.is_none_or(|i| i < 4));
            prop_assert_eq!(a, parse_choice(&raw, &q));
        }
    }

    /// Answers from a fixed table of outputs per question id.
    struct Scripted(HashMap<String, String>);

    impl ModelInterface for Scripted {
        fn generate(&self, r: &GenerationRequest<'_>) -> Result<String> {
            self.0
                .get(r.question_id)
                .cloned()
                .ok_or_else(|| Error::Evaluation("unknown".into()))
        }

        fn option_logprob(&self, _: &str, option: &str) -> Result<OptionScore> {
            // all mass on the first option's text
            let lp = if option == "alpha" { 0.0 } else { f64::NEG_INFINITY };
            Ok(OptionScore { logprob: lp, n_tokens: 1 })
        }
    }

    #[test]
    fn echo_model_scores_perfectly_and_prose_scores_zero() {
        let qs = synthetic(20, |_| 0);
        let echo = Scripted(qs.iter().map(|q| (q.id.clone(), format!("1.{}", q.choices[0]))).collect());
        let r = eval_expressive(&echo, &qs, &GenerationParams::default(), &PromptMode::ZeroShot, Exec::Sequential).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let prose = Scripted(qs.iter().map(|q| (q.id.clone(), "The weather is nice today.".into())).collect());
        let r = eval_expressive(&prose, &qs, &GenerationParams::default(), &PromptMode::Magical, Exec::Sequential).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(r.records.iter().all(|x| x.parsed_index.is_none() && !x.correct));
    }

    #[test]
    fn item_failures_are_recorded_and_total_failure_errors() {
        let qs = synthetic(4, |_| 1);
        let partial = Scripted([("q0".to_string(), "2. beta".to_string())].into());
        let r = eval_expressive(&partial, &qs, &GenerationParams::default(), &PromptMode::ZeroShot, Exec::Parallel).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.records.len(), 4);
        let none = Scripted(HashMap::new());
        assert!(matches!(
            eval_expressive(&none, &qs, &GenerationParams::default(), &PromptMode::ZeroShot, Exec::Parallel),
            Err(Error::Evaluation(_))
        ));
        assert!(eval_expressive(&none, &[], &GenerationParams::default(), &PromptMode::ZeroShot, Exec::Parallel).is_err());
    }

    #[test]
    fn few_shot_and_magical_prompts() {
        let q = case_study();
        let fs = PromptMode::few_shot_reference().prompt(&q).unwrap();
        assert!(fs.starts_with("Which statement best explains"));
        assert!(fs.ends_with(&templates::wrap_template_b(&q)));
        let m = PromptMode::Magical.prompt(&q).unwrap();
        assert!(m.ends_with("important for human society!"));
    }

    /// Correct with probability `p` per sample, independently.
    struct Coin {
        p: f64,
        answers: HashMap<String, usize>,
    }

    impl ModelInterface for Coin {
        fn generate(&self, r: &GenerationRequest<'_>) -> Result<String> {
            let mut rng = ChaCha8Rng::seed_from_u64(r.params.seed);
            let c = self.answers[r.question_id];
            let pick = if rng.random::<f64>() < self.p { c } else { (c + 1) % 4 };
            Ok(format!("{}.", pick + 1))
        }

        fn option_logprob(&self, _: &str, _: &str) -> Result<OptionScore> {
            Err(Error::Evaluation("no".into()))
        }
    }

    fn coin(qs: &[ChoiceQuestion], p: f64) -> Coin {
        Coin {
            p,
            answers: qs.iter().map(|q| (q.id.clone(), q.correct_index)).collect(),
        }
    }

    #[test]
    fn repeated_sampling_matches_closed_form() {
        let qs = synthetic(10_000, |i| i % 4);
        let m = coin(&qs, 0.3);
        let acc = eval_repeated(&m, &qs, &GenerationParams::default(), DEFAULT_REPEATS, Exec::Parallel).unwrap();
        let expected = 1.0 - 0.7f64.powi(8);
        assert!((expected - 0.9424).abs() < 1e-4);
        assert!((acc - expected).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn repeated_curve_is_monotone_and_starts_at_single_sample() {
        let qs = synthetic(300, |i| (i * 7) % 4);
        let m = coin(&qs, 0.2);
        let params = GenerationParams { seed: 42, ..Default::default() };
        let curve = eval_repeated_curve(&m, &qs, &params, 8, Exec::Parallel).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        let single = eval_expressive(&m, &qs, &params, &PromptMode::ZeroShot, Exec::Sequential).unwrap();
        assert_eq!(curve[0], single.accuracy);
        // nested seeds: the k=3 run is a prefix of the k=8 run
        let short = eval_repeated_curve(&m, &qs, &params, 3, Exec::Sequential).unwrap();
        assert_eq!(short[..], curve[..3]);
        let never = coin(&qs, 0.0);
        assert!(eval_repeated_curve(&never, &qs, &params, 5, Exec::Parallel).unwrap().iter().all(|&a| a == 0.0));
        assert!(eval_repeated(&m, &qs, &params, 0, Exec::Parallel).is_err());
    }

    #[test]
    fn likelihood_ranking_follows_scores() {
        let qs = synthetic(10, |i| i % 4);
        let m = Scripted(HashMap::new());
        let r = eval_likelihood_ranking(&m, &qs, LikelihoodScoring::Sum, Exec::Sequential).unwrap();
        assert!(r.predictions.iter().all(|&p| p == 0));
        assert!((r.accuracy - 0.3).abs() < 1e-12);
        let t = TranscriptModel::default();
        assert!(matches!(
            eval_likelihood_ranking(&t, &qs, LikelihoodScoring::Sum, Exec::Sequential),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn transcript_round_trip_and_replay() {
        let text = format_transcript([("q0", 0, "1. alpha"), ("q\t1", 0, "line\nbreak beta"), ("q0", 1, "4.")]);
        let t = TranscriptModel::parse(&text).unwrap();
        assert_eq!(t.len(), 3);
        let qs = vec![
            ChoiceQuestion::new("q0", "x?", ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec(), 3).unwrap(),
            ChoiceQuestion::new("q\t1", "y?", ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec(), 1).unwrap(),
        ];
        let r = eval_expressive(&t, &qs, &GenerationParams::default(), &PromptMode::ZeroShot, Exec::Sequential).unwrap();
        assert_eq!(r.records[0].parsed_index, Some(0));
        assert_eq!(r.records[1].raw_output, "line\nbreak beta");
        assert_eq!(r.accuracy, 0.5);
        let curve = eval_repeated_curve(&t, &qs, &GenerationParams::default(), 2, Exec::Sequential).unwrap();
        assert_eq!(curve, vec![0.5, 1.0]);
        assert!(TranscriptModel::parse("a\tb\tc").is_err());
        assert!(TranscriptModel::parse("a\t0").is_err());
        assert!(TranscriptModel::parse("a\t0\tx\na\t0\ty").is_err());
    }

    #[test]
    fn seeds_are_order_free_and_distinct() {
        assert_eq!(derive_seed(1, "q", 2), derive_seed(1, "q", 2));
        assert_ne!(derive_seed(1, "q", 2), derive_seed(1, "q", 3));
        assert_ne!(derive_seed(1, "q", 2), derive_seed(1, "r", 2));
        assert_ne!(derive_seed(1, "q", 2), derive_seed(2, "q", 2));
    }
}
