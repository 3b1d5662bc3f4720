//! Prompt wrappers for per-choice correctness probing (template A), direct
//! single-choice answering (template B), few-shot prefixes and the
//! "magical" suffix, plus the tab-separated question file format.
//!
//! Every wrapper is a pure, byte-exact function of its inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

pub const N_CHOICES: usize = 4;

pub const MAGICAL_SUFFIX: &str =
    "Let's think step by step and take a deep breathe, the task is very important for human society!";

pub const DIRECT_INSTRUCTION: &str = "Choose only one answer directly.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceQuestion {
    pub id: String,
    pub question: String,
    pub choices: [String; N_CHOICES],
    pub correct_index: usize,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ChoiceQuestion {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        choices: Vec<String>,
        correct_index: usize,
    ) -> Result<Self> {
        let id = id.into();
        let choices: [String; N_CHOICES] = choices.try_into().map_err(|c: Vec<String>| {
            arg(format!("question '{id}': expected {N_CHOICES} choices, got {}", c.len()))
        })?;
        if correct_index >= N_CHOICES {
            return Err(arg(format!(
                "question '{id}': correct_index {correct_index} outside 0..{N_CHOICES}"
            )));
        }
        let normalized: Vec<String> = choices.iter().map(|c| normalize_ws(c)).collect();
        for i in 0..N_CHOICES {
            for j in i + 1..N_CHOICES {
                if normalized[i] == normalized[j] {
                    return Err(arg(format!(
                        "question '{id}': choices {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(Self {
            id,
            question: question.into(),
            choices,
            correct_index,
        })
    }
}

/// Per-choice correctness prompt.
pub fn wrap_template_a(q: &ChoiceQuestion, choice_index: usize) -> Result<String> {
    let choice = q
        .choices
        .get(choice_index)
        .ok_or_else(|| arg(format!("choice index {choice_index} outside 0..{N_CHOICES}")))?;
    Ok(format!(
        "Consider the correctness of the answer to the following question. Question: {}, Answer: {}. Directly answer correct or wrong:",
        q.question, choice
    ))
}

/// Direct single-choice prompt with numbered options.
pub fn wrap_template_b(q: &ChoiceQuestion) -> String {
    let [c1, c2, c3, c4] = &q.choices;
    format!(
        "{} 1.{c1} 2.{c2} 3.{c3} 4.{c4}. {DIRECT_INSTRUCTION}",
        q.question
    )
}

/// One worked example for a few-shot prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub wrapped_question: String,
    pub answer_line: String,
}

impl Exemplar {
    pub fn new(wrapped_question: impl Into<String>, answer_line: impl Into<String>) -> Result<Self> {
        let answer_line = answer_line.into();
        if answer_line.trim().is_empty() {
            return Err(arg("exemplar answer line is empty"));
        }
        Ok(Self {
            wrapped_question: wrapped_question.into(),
            answer_line,
        })
    }

    /// Template-B exemplar answered with its correct option, `"<n>. <choice>"`.
    pub fn from_question(q: &ChoiceQuestion) -> Self {
        Self {
            wrapped_question: wrap_template_b(q),
            answer_line: format!("{}. {}", q.correct_index + 1, q.choices[q.correct_index]),
        }
    }
}

/// The two worked examples used for 2-shot prompting of English
/// single-choice benchmarks.
pub fn reference_exemplars() -> [Exemplar; 2] {
    [
        Exemplar {
            wrapped_question: "Which statement best explains why photosynthesis is the foundation of most food webs?\n\nA. Sunlight is the source of energy for nearly all ecosystems.\n\nB. Most ecosystems are found on land instead of in water.\n\nC. Carbon dioxide is more available than other gases.\n\nD. The producers in all ecosystems are plants.\n\nChoose only one answer directly.".into(),
            answer_line: "A. Sunlight is the source of energy for nearly all ecosystems.".into(),
        },
        Exemplar {
            wrapped_question: "Which piece of safety equipment is used to keep mold spores from entering the respiratory system?\n\nA. safety goggles\n\nB. breathing mask\n\nC. rubber gloves\n\nD. lead apron\n\nChoose only one answer directly.".into(),
            answer_line: "B. breathing mask.".into(),
        },
    ]
}

/// Prepends exemplar blocks (`question\nanswer\n\n`) in the given order.
pub fn prepend_few_shot(prompt: &str, exemplars: &[Exemplar]) -> Result<String> {
    if exemplars.is_empty() {
        return Err(arg("few-shot prefix needs at least one exemplar"));
    }
    let mut out = String::new();
    for e in exemplars {
        out.push_str(&e.wrapped_question);
        out.push('\n');
        out.push_str(&e.answer_line);
        out.push_str("\n\n");
    }
    out.push_str(prompt);
    Ok(out)
}

/// Appends the fixed encouragement sentence, space-separated.
pub fn append_magical(prompt: &str) -> String {
    if prompt.is_empty() {
        MAGICAL_SUFFIX.to_string()
    } else {
        format!("{prompt} {MAGICAL_SUFFIX}")
    }
}

/// Escapes `\`, tab, newline and carriage return for line-delimited files.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(c) => return Err(arg(format!("unknown escape '\\{c}'"))),
            None => return Err(arg("dangling escape at end of field")),
        }
    }
    Ok(out)
}

/// Parses `id\tquestion\tc1\tc2\tc3\tc4\tcorrect_index` lines. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_questions(text: &str) -> Result<Vec<ChoiceQuestion>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |e: Error| arg(format!("question file line {}: {e}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 + N_CHOICES {
            return Err(arg(format!(
                "question file line {}: expected {} tab-separated fields, got {}",
                lineno + 1,
                3 + N_CHOICES,
                fields.len()
            )));
        }
        let correct: usize = fields[6]
            .trim()
            .parse()
            .map_err(|e| arg(format!("question file line {}: correct_index: {e}", lineno + 1)))?;
        let choices = fields[2..6]
            .iter()
            .map(|f| unescape_field(f))
            .collect::<Result<Vec<_>>>()
            .map_err(at)?;
        let q = ChoiceQuestion::new(
            unescape_field(fields[0]).map_err(at)?,
            unescape_field(fields[1]).map_err(at)?,
            choices,
            correct,
        )
        .map_err(at)?;
        out.push(q);
    }
    Ok(out)
}

pub fn format_questions(questions: &[ChoiceQuestion]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&escape_field(&q.id));
        out.push('\t');
        out.push_str(&escape_field(&q.question));
        for c in &q.choices {
            out.push('\t');
            out.push_str(&escape_field(c));
        }
        out.push('\t');
        out.push_str(&q.correct_index.to_string());
        out.push('\n');
    }
    out
}

pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<ChoiceQuestion>> {
    parse_questions(&fs::read_to_string(path)?)
}

pub fn write_questions(path: impl AsRef<Path>, questions: &[ChoiceQuestion]) -> Result<()> {
    fs::write(path, format_questions(questions))?;
    Ok(())
}
