use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Record of one invocation. Holds the wall-clock duration, so it is the
/// one output that differs between otherwise identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub duration_seconds: f64,
}

pub struct Recorder {
    started: Instant,
    subcommand: &'static str,
    args: Vec<String>,
    seed: Option<u64>,
}

impl Recorder {
    pub fn start(subcommand: &'static str, argv: &[String], seed: Option<u64>) -> Self {
        Self {
            started: Instant::now(),
            subcommand,
            args: argv.iter().skip(1).cloned().collect(),
            seed,
        }
    }

    /// Writes the manifest through a temporary file and a rename so a
    /// crashed run never leaves a half-written manifest behind.
    pub fn finish(self, path: &Path, outputs: Vec<PathBuf>) -> anyhow::Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            args: self.args,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
