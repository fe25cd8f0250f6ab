use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    Parse { path: PathBuf, line: u64, message: String },
    Core { context: String, source: ratefield::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn core(context: String) -> impl FnOnce(ratefield::Error) -> Self {
        move |source| CliError::Core { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        use ratefield::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Parse { .. } => 2,
            CliError::Core { source, .. } => match source {
                E::NonConvergence { .. } => 4,
                E::InvalidArgument(_) | E::GridMismatch => 2,
                _ => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Parse { path, line, message } => write!(f, "{}:{line}: {message}", path.display()),
            CliError::Core { context, source } => write!(f, "{context}: {source}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.clone()
        .ok_or_else(|| CliError::Usage(format!("missing required input --{flag}")))
}

/// Read a CSV whose header is exactly `columns`; every field must be a
/// finite number.
pub fn read_table(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Parse { path: path.into(), line: 1, message: format!("{other:?}") },
    })?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found.len() < columns.len() || found[..columns.len()] != *columns {
        return Err(CliError::Parse {
            path: path.into(),
            line: 1,
            message: format!("expected header {:?}, found {:?}", columns.join(","), found.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = columns
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let field = record.get(k).unwrap_or("").trim();
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CliError::Parse {
                    path: path.into(),
                    line,
                    message: format!("column {name}: not a finite number: {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::Parse { path: path.into(), line, message: e.to_string() }
}

pub fn write_table(path: &Path, columns: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    w.write_record(columns).map_err(|e| CliError::io(path, e.into()))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        eprintln!("note: created output directory {}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest<P: Serialize> {
    pub command: String,
    pub version: String,
    pub parameters: P,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

/// Collects inputs and outputs of one run and writes
/// `<out_dir>/<command>.manifest.json` at the end.
pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &'static str, out_dir: &Path) -> Result<Self, CliError> {
        ensure_dir(out_dir)?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Path of an output file, registered for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn finish<P: Serialize>(self, parameters: &P, seeds: Vec<u64>) -> Result<(), CliError> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>, CliError> {
            paths.iter().map(|p| Ok(FileDigest { path: p.clone(), sha256: sha256(p)? })).collect()
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            parameters,
            seeds,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(format!("{}.manifest.json", self.command));
        write_json(&path, &manifest)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}
