//! Run directories: every command writes its outputs under one directory
//! together with a `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    outputs: &'a [String],
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    summary: &'a serde_json::Value,
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    argv: Vec<String>,
    started: u64,
    outputs: Vec<String>,
    summary: serde_json::Value,
}

impl RunDir {
    /// Uses `dir` or `runs/<command>-<unix time>`.
    pub fn create(dir: Option<&Path>, command: &str) -> Result<RunDir> {
        let started = unix_now();
        let path = match dir {
            Some(d) => d.to_path_buf(),
            None => PathBuf::from("runs").join(format!("{command}-{started}")),
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            argv: std::env::args().collect(),
            started,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records an output file, by path relative to the run directory when
    /// possible.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.path).unwrap_or(path);
        let s = rel.display().to_string();
        if !self.outputs.contains(&s) {
            self.outputs.push(s);
        }
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(&path);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn set_summary<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.summary = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.file("manifest.json");
        let m = Manifest {
            command: &self.command,
            argv: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: &self.outputs,
            summary: &self.summary,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
