use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

/// One record per invocation, written next to its outputs whether the run
/// succeeded or not.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub threads: usize,
    pub seed: Option<u64>,
    pub resolved_config: Value,
    pub checkpoint_ids: Vec<String>,
    pub outputs: Vec<PathBuf>,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl Manifest {
    pub fn start(command: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: 0.0,
            threads: rayon::current_num_threads(),
            seed: None,
            resolved_config: Value::Null,
            checkpoint_ids: Vec::new(),
            outputs: Vec::new(),
            status: "running".into(),
            exit_code: 0,
            error: None,
            started: Some(Instant::now()),
        }
    }

    pub fn finish(&mut self, exit_code: i32, error: Option<String>) {
        self.wall_clock_secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        self.exit_code = exit_code;
        self.status = if exit_code == 0 { "ok" } else { "failed" }.into();
        self.error = error;
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text)
    }
}
