//! Run manifest: written before any work starts and finalized on exit.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const VERSION: &str = env!("RAPO_LAB_VERSION");

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved configuration, one `key = value` pair per entry.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub version: String,
    pub argv: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub exit_code: Option<i32>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Vec<(String, String)>, seed: u64, out_dir: &Path) -> Self {
        Self {
            subcommand: subcommand.into(),
            config,
            seed,
            out_dir: out_dir.to_path_buf(),
            version: VERSION.into(),
            argv: std::env::args().collect(),
            started_unix: unix_now(),
            finished_unix: None,
            exit_code: None,
        }
    }

    fn path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    pub fn write(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(self.path(), text)
    }

    pub fn finish(&mut self, code: i32) -> std::io::Result<()> {
        self.finished_unix = Some(unix_now());
        self.exit_code = Some(code);
        self.write()
    }
}

/// Splits the canonical `key = value` text into pairs.
pub fn config_pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
