//! Output directory handling: atomic writes, CSV/JSON emission and the run
//! manifest.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `path` by letting `write` fill a temporary sibling, then renaming
/// it into place. `write` may also create `<tmp>.meta`; it is moved along.
pub fn write_atomic<F>(path: &Path, write: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".gapscope-")
        .tempfile_in(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .into_temp_path();
    let tmp_meta = gapscope::store::meta_path(&tmp);
    let result = write(&tmp);
    if result.is_err() {
        let _ = fs::remove_file(&tmp_meta);
        return result;
    }
    if tmp_meta.exists() {
        let meta = gapscope::store::meta_path(path);
        fs::rename(&tmp_meta, &meta).map_err(|e| CliError::io(&meta, e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: Option<u64>,
    threads: Option<usize>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn entry(path: &Path, shown: String) -> CliResult<FileEntry> {
    Ok(FileEntry {
        sha256: sha256_file(path)?,
        bytes: fs::metadata(path).map_err(|e| CliError::io(path, e))?.len(),
        path: shown,
    })
}

/// An output directory that remembers what was read and written.
pub struct OutDir {
    root: PathBuf,
    command: &'static str,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    manifest: String,
}

impl OutDir {
    pub fn create(root: &Path, command: &'static str) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            command,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest: "manifest.json".into(),
        })
    }

    /// For commands whose output is a single file: the directory is the
    /// file's parent and the manifest sits next to it as
    /// `<file>.manifest.json`. Returns the file name to write.
    pub fn for_file(path: &Path, command: &'static str) -> CliResult<(Self, String)> {
        let name = path
            .file_name()
            .ok_or_else(|| CliError::runtime(format!("{}: not a file path", path.display())))?
            .to_string_lossy()
            .into_owned();
        let root = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut out = Self::create(root, command)?;
        out.manifest = format!("{name}.manifest.json");
        Ok((out, name))
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
        let meta = gapscope::store::meta_path(path);
        if meta.exists() {
            self.inputs.push(meta);
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through a caller-supplied writer; dump sidecars are
    /// recorded too.
    pub fn write_with<F>(&mut self, name: &str, write: F) -> CliResult<PathBuf>
    where
        F: FnOnce(&Path) -> CliResult<()>,
    {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_atomic(&path, write)?;
        self.outputs.push(name.to_string());
        if gapscope::store::meta_path(&path).exists() {
            self.outputs.push(format!("{name}.meta"));
        }
        Ok(path)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<PathBuf> {
        self.write_with(name, |p| {
            let mut w = csv::Writer::from_path(p).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            for r in rows {
                w.serialize(r).map_err(|e| CliError::runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::io(p, e))
        })
    }

    /// CSV from pre-formatted records (for tables whose columns are only
    /// known at run time).
    pub fn csv_records(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        self.write_with(name, |p| {
            let mut w = csv::Writer::from_path(p).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            let io = |e: csv::Error| CliError::runtime(e.to_string());
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::io(p, e))
        })
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        self.write_with(name, |p| {
            let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
            fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))
        })
    }

    /// Writes the manifest with digests of every input and output.
    pub fn finish(self) -> CliResult<PathBuf> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| entry(p, p.display().to_string()))
            .collect::<CliResult<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|n| entry(&self.root.join(n), n.clone()))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            seed: self.seed,
            threads: crate::threads(),
            inputs,
            outputs,
        };
        let path = self.root.join(&self.manifest);
        write_atomic(&path, |p| {
            let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
            fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))
        })?;
        Ok(path)
    }
}

/// One-line metric summary consumed by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Summary {
    pub command: String,
    pub model_id: String,
    pub stage: String,
    pub training_tokens: u64,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

impl Summary {
    pub fn new(command: &str, model_id: &str, stage: impl ToString, training_tokens: u64) -> Self {
        Self {
            command: command.into(),
            model_id: model_id.into(),
            stage: stage.to_string(),
            training_tokens,
            metrics: Default::default(),
        }
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }
}
