//! Reproducibility record written into the output directory by every run.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::Value;

pub const RUN_RECORD_FILE: &str = "run_record.json";

#[derive(Debug, Serialize)]
pub struct Versions {
    pub eventxai: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn start(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            versions: Versions {
                eventxai: env!("CARGO_PKG_VERSION"),
                os: std::env::consts::OS,
                arch: std::env::consts::ARCH,
            },
            started_at: Utc::now(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, out: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("record serializes");
        text.push('\n');
        std::fs::write(out.join(RUN_RECORD_FILE), text)
    }

    pub fn finish(&mut self, out: &Path, result: &anyhow::Result<()>) -> std::io::Result<()> {
        self.finished_at = Some(Utc::now());
        self.status = match result {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e:#}"),
        };
        self.write(out)
    }
}
