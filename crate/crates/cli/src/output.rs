use std::fs;
use std::path::{Path, PathBuf};

use attriprior::experiments::{AggregateReport, ExperimentConfig, ReplicateReport};
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

/// One replicate's report together with everything needed to reproduce it.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicateFile {
    pub config: ExperimentConfig,
    pub replicate: usize,
    pub replicate_seed: u64,
    pub report: ReplicateReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateFile {
    pub config: ExperimentConfig,
    pub replicate_seeds: Vec<u64>,
    pub report: AggregateReport,
}

pub fn replicate_path(dir: &Path, r: usize) -> PathBuf {
    dir.join(format!("replicate_{r:03}.json"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Replicate files in `dir`, ordered by replicate index.
pub fn read_replicates(dir: &Path) -> Result<Vec<ReplicateFile>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("replicate_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        let file: ReplicateFile =
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        files.push(file);
    }
    files.sort_by_key(|f| f.replicate);
    Ok(files)
}
