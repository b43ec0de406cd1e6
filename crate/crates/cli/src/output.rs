//! Atomic file writes, CSV curves and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use cvqd_core::fock::fmt_f64;

use crate::error::{CliError, CliResult};

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    let name = path.file_name().ok_or_else(|| CliError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if let Err(e) = fs::write(&tmp, contents).and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path.display(), e));
    }
    Ok(())
}

/// `t,<column>` rows in the given order.
pub fn curve_csv(column: &str, rows: &[(usize, f64)]) -> String {
    let mut out = format!("t,{column}\n");
    for (t, v) in rows {
        let _ = writeln!(out, "{t},{}", fmt_f64(*v));
    }
    out
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// What a command ran with and what it wrote. Written last, as `manifest.json`
/// in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, config: Option<&Path>, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config: config.map(Path::to_path_buf),
            seed,
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    /// Writes `contents` atomically and records the path.
    pub fn write(&mut self, path: PathBuf, contents: &[u8]) -> CliResult<()> {
        write_atomic(&path, contents)?;
        self.outputs.push(path);
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> CliResult<PathBuf> {
        self.finished_unix_ms = unix_ms();
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::io("manifest", e))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
