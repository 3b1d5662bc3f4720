//! Activation dumps: per-example, per-layer last-token hidden states plus
//! labels and checkpoint metadata.
//!
//! On disk a dump is two files. The binary payload (little-endian):
//!
//! ```text
//! magic        4 bytes   "ACTD"
//! version      u32       1
//! flags        u32       bit 0 = pair-mode
//! n_examples   u32
//! n_layers     u32
//! hidden_size  u32
//! payload      f32 * n_examples * n_layers * hidden_size   [example][layer][dim]
//! ```
//!
//! and a sidecar `<file name>.meta` of `key=value` lines (`model_id`,
//! `stage`, `training_tokens`) followed by one `label,group_id` line per
//! example.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DUMP_MAGIC: [u8; 4] = *b"ACTD";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const FLAG_PAIR_MODE: u32 = 1;

/// Rows per question in pair-mode.
pub const PAIR_GROUP_SIZE: usize = 4;

/// Max non-finite locations itemized in a report before summarizing.
const MAX_NONFINITE_ISSUES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Rlhf,
    Toy,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rlhf => "rlhf",
            Stage::Toy => "toy",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "rlhf" => Ok(Stage::Rlhf),
            "toy" => Ok(Stage::Toy),
            other => Err(Error::Argument(format!("unknown stage '{other}'"))),
        }
    }
}

/// How rows are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpMode {
    /// Four `(question, choice_i)` rows per question, binary labels, exactly
    /// one correct row per group.
    Pair,
    /// One row per example; label is a binary flag or a choice index < 4.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub model_id: String,
    pub stage: Stage,
    pub training_tokens: u64,
    pub mode: DumpMode,
    pub n_examples: usize,
    pub n_layers: usize,
    pub hidden_size: usize,
    /// Row-major `[example][layer][dim]`.
    pub embeddings: Vec<f32>,
    pub labels: Vec<u32>,
    pub group_ids: Vec<String>,
}

/// Rows of one question in a pair-mode dump, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub id: String,
    pub rows: Vec<usize>,
}

impl ActivationDump {
    /// An all-zero dump with the given shape; labels and group ids empty.
    pub fn zeros(mode: DumpMode, n_examples: usize, n_layers: usize, hidden_size: usize) -> Self {
        Self {
            model_id: String::new(),
            stage: Stage::Toy,
            training_tokens: 0,
            mode,
            n_examples,
            n_layers,
            hidden_size,
            embeddings: vec![0.0; n_examples * n_layers * hidden_size],
            labels: Vec::new(),
            group_ids: Vec::new(),
        }
    }

    fn offset(&self, example: usize, layer: usize) -> usize {
        (example * self.n_layers + layer) * self.hidden_size
    }

    /// Hidden vector of `example` at `layer`.
    pub fn vector(&self, example: usize, layer: usize) -> &[f32] {
        let o = self.offset(example, layer);
        &self.embeddings[o..o + self.hidden_size]
    }

    pub fn vector_mut(&mut self, example: usize, layer: usize) -> &mut [f32] {
        let o = self.offset(example, layer);
        &mut self.embeddings[o..o + self.hidden_size]
    }

    /// All rows of one layer widened to `f64`.
    pub fn layer_rows(&self, layer: usize) -> Vec<Vec<f64>> {
        (0..self.n_examples)
            .map(|e| self.vector(e, layer).iter().map(|&x| x as f64).collect())
            .collect()
    }

    /// Groups rows by `group_id`, ordered by first appearance.
    pub fn groups(&self) -> Vec<Group> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Group> = Vec::new();
        for (row, id) in self.group_ids.iter().enumerate() {
            match index.get(id.as_str()) {
                Some(&g) => groups[g].rows.push(row),
                None => {
                    index.insert(id, groups.len());
                    groups.push(Group {
                        id: id.clone(),
                        rows: vec![row],
                    });
                }
            }
        }
        groups
    }

    pub fn validate(&self) -> ValidationReport {
        validate_dump(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn push(&mut self, severity: Severity, location: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            severity,
            location: location.into(),
            message: message.into(),
        });
    }

    fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Error, location, message);
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    fn finish(mut self) -> Self {
        let ok = self.errors().next().is_none();
        self.ok = ok;
        self
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok && self.issues.is_empty() {
            return f.write_str("ok");
        }
        let n_err = self.errors().count();
        write!(f, "{} error(s), {} warning(s)", n_err, self.issues.len() - n_err)?;
        for issue in &self.issues {
            let tag = match issue.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            write!(f, "\n  {tag} [{}] {}", issue.location, issue.message)?;
        }
        Ok(())
    }
}

/// Checks every dump invariant and reports each violation with a location.
pub fn validate_dump(dump: &ActivationDump) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = dump.n_examples;

    if dump.n_layers == 0 {
        report.error("header", "n_layers must be at least 1");
    }
    if dump.hidden_size == 0 {
        report.error("header", "hidden_size must be at least 1");
    }
    for (name, value) in [
        ("n_examples", dump.n_examples),
        ("n_layers", dump.n_layers),
        ("hidden_size", dump.hidden_size),
    ] {
        if u32::try_from(value).is_err() {
            report.error("header", format!("{name} = {value} does not fit in u32"));
        }
    }

    let expected = n
        .checked_mul(dump.n_layers)
        .and_then(|x| x.checked_mul(dump.hidden_size));
    match expected {
        Some(len) if len == dump.embeddings.len() => {
            let mut nonfinite = 0usize;
            for (i, v) in dump.embeddings.iter().enumerate() {
                if !v.is_finite() {
                    if nonfinite < MAX_NONFINITE_ISSUES {
                        let dim = i % dump.hidden_size;
                        let layer = (i / dump.hidden_size) % dump.n_layers;
                        let ex = i / (dump.hidden_size * dump.n_layers);
                        report.error(
                            format!("embeddings[{ex}][{layer}][{dim}]"),
                            format!("non-finite value at ({ex},{layer},{dim})"),
                        );
                    }
                    nonfinite += 1;
                }
            }
            if nonfinite > MAX_NONFINITE_ISSUES {
                report.error(
                    "embeddings",
                    format!("{} further non-finite values", nonfinite - MAX_NONFINITE_ISSUES),
                );
            }
        }
        Some(len) => report.error(
            "embeddings",
            format!(
                "length {} != n_examples*n_layers*hidden_size = {len}",
                dump.embeddings.len()
            ),
        ),
        None => report.error("header", "shape product overflows"),
    }

    if dump.labels.len() != n {
        report.error(
            "labels",
            format!("length {} != n_examples {n}", dump.labels.len()),
        );
    }
    if dump.group_ids.len() != n {
        report.error(
            "group_ids",
            format!("length {} != n_examples {n}", dump.group_ids.len()),
        );
    }

    let label_limit = match dump.mode {
        DumpMode::Pair => 1,
        DumpMode::Direct => (PAIR_GROUP_SIZE - 1) as u32,
    };
    for (i, &label) in dump.labels.iter().enumerate() {
        if label > label_limit {
            report.error(
                format!("labels[{i}]"),
                format!("label {label} outside 0..={label_limit}"),
            );
        }
    }

    for (i, id) in dump.group_ids.iter().enumerate() {
        if id.contains('\n') || id.contains('\r') {
            report.error(format!("group_ids[{i}]"), "group id contains a line break");
        } else if id.trim().is_empty() {
            report.push(Severity::Warning, format!("group_ids[{i}]"), "empty group id");
        }
    }
    for (key, value) in [("model_id", &dump.model_id)] {
        if value.contains('\n') || value.contains('\r') {
            report.error(key, "contains a line break");
        }
    }

    if dump.mode == DumpMode::Pair && dump.labels.len() == n && dump.group_ids.len() == n {
        let groups = dump.groups();
        if groups.is_empty() && n == 0 {
            report.push(Severity::Warning, "groups", "pair-mode dump has no questions");
        }
        for g in &groups {
            if g.rows.len() != PAIR_GROUP_SIZE {
                report.error(
                    format!("group '{}'", g.id),
                    format!("group size {} ≠ {PAIR_GROUP_SIZE}", g.rows.len()),
                );
            }
            let correct = g.rows.iter().filter(|&&r| dump.labels[r] == 1).count();
            if correct != 1 {
                report.error(
                    format!("group '{}'", g.id),
                    format!("{correct} rows labeled correct, expected exactly 1"),
                );
            }
        }
    }

    report.finish()
}

/// Path of the metadata sidecar for a dump at `path`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta");
    path.with_file_name(name)
}

pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let report = validate_dump(dump);
    if !report.ok {
        return Err(Error::Validation(report));
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&DUMP_MAGIC)?;
    let flags = match dump.mode {
        DumpMode::Pair => FLAG_PAIR_MODE,
        DumpMode::Direct => 0,
    };
    for v in [
        DUMP_VERSION,
        flags,
        dump.n_examples as u32,
        dump.n_layers as u32,
        dump.hidden_size as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &dump.embeddings {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;

    let mut meta = BufWriter::new(File::create(meta_path(path))?);
    writeln!(meta, "model_id={}", dump.model_id)?;
    writeln!(meta, "stage={}", dump.stage)?;
    writeln!(meta, "training_tokens={}", dump.training_tokens)?;
    for (label, id) in dump.labels.iter().zip(&dump.group_ids) {
        writeln!(meta, "{label},{id}")?;
    }
    meta.flush()?;
    Ok(())
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parsed fixed-size header of an `ACTD` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub mode: DumpMode,
    pub n_examples: usize,
    pub n_layers: usize,
    pub hidden_size: usize,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Reads and checks the header, including that the file length matches the
/// declared payload. Nothing beyond the header is read.
pub fn read_header(path: impl AsRef<Path>) -> Result<DumpHeader> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    if actual < 4 {
        return Err(format_err(path, "file shorter than magic"));
    }
    if actual < HEADER_LEN {
        file.read_exact(&mut header[..4])?;
        if header[..4] != DUMP_MAGIC {
            return Err(format_err(path, "bad magic"));
        }
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual,
        });
    }
    file.read_exact(&mut header)?;
    if header[..4] != DUMP_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&header[..4])),
        ));
    }
    let version = read_u32(&header, 4);
    if version != DUMP_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: DUMP_VERSION,
        });
    }
    let flags = read_u32(&header, 8);
    if flags & !FLAG_PAIR_MODE != 0 {
        return Err(format_err(path, format!("unknown flag bits {flags:#x}")));
    }
    let n_examples = read_u32(&header, 12) as u64;
    let n_layers = read_u32(&header, 16) as u64;
    let hidden_size = read_u32(&header, 20) as u64;
    let expected = n_examples
        .checked_mul(n_layers)
        .and_then(|x| x.checked_mul(hidden_size))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(path, "declared payload size overflows"))?;
    if expected != actual {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(DumpHeader {
        mode: if flags & FLAG_PAIR_MODE != 0 {
            DumpMode::Pair
        } else {
            DumpMode::Direct
        },
        n_examples: n_examples as usize,
        n_layers: n_layers as usize,
        hidden_size: hidden_size as usize,
    })
}

struct Meta {
    model_id: String,
    stage: Stage,
    training_tokens: u64,
    labels: Vec<u32>,
    group_ids: Vec<String>,
}

fn read_meta(path: &Path, n_examples: usize) -> Result<Meta> {
    let reader = BufReader::new(File::open(path)?);
    let mut model_id = None;
    let mut stage = None;
    let mut training_tokens = None;
    let mut labels = Vec::with_capacity(n_examples);
    let mut group_ids = Vec::with_capacity(n_examples);

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let at = |msg: String| format_err(path, format!("line {}: {msg}", lineno + 1));
        if lineno < 3 {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got '{line}'")))?;
            match (lineno, key) {
                (0, "model_id") => model_id = Some(value.to_string()),
                (1, "stage") => stage = Some(value.parse::<Stage>().map_err(|e| at(e.to_string()))?),
                (2, "training_tokens") => {
                    training_tokens =
                        Some(value.parse::<u64>().map_err(|e| at(format!("training_tokens: {e}")))?)
                }
                _ => return Err(at(format!("unexpected key '{key}'"))),
            }
            continue;
        }
        let (label, id) = line
            .split_once(',')
            .ok_or_else(|| at(format!("expected label,group_id, got '{line}'")))?;
        labels.push(label.parse::<u32>().map_err(|e| at(format!("label: {e}")))?);
        group_ids.push(id.to_string());
    }

    let missing = |k: &str| format_err(path, format!("missing key '{k}'"));
    let meta = Meta {
        model_id: model_id.ok_or_else(|| missing("model_id"))?,
        stage: stage.ok_or_else(|| missing("stage"))?,
        training_tokens: training_tokens.ok_or_else(|| missing("training_tokens"))?,
        labels,
        group_ids,
    };
    if meta.labels.len() != n_examples {
        return Err(format_err(
            path,
            format!("{} example lines, header declares {n_examples}", meta.labels.len()),
        ));
    }
    Ok(meta)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let path = path.as_ref();
    let header = read_header(path)?;

    let bytes = fs::read(path)?;
    let payload = &bytes[HEADER_LEN as usize..];
    let embeddings: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let meta = read_meta(&meta_path(path), header.n_examples)?;
    let dump = ActivationDump {
        model_id: meta.model_id,
        stage: meta.stage,
        training_tokens: meta.training_tokens,
        mode: header.mode,
        n_examples: header.n_examples,
        n_layers: header.n_layers,
        hidden_size: header.hidden_size,
        embeddings,
        labels: meta.labels,
        group_ids: meta.group_ids,
    };
    let report = validate_dump(&dump);
    if !report.ok {
        return Err(Error::Validation(report));
    }
    Ok(dump)
}
