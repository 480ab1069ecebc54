//! Run manifests: the fully-resolved command plus provenance, written next to
//! every run's outputs so `maskdiff rerun --manifest ...` can reproduce them.

use std::path::{Path, PathBuf};

use maskdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every parameter a run depends on, after defaults are applied. Data outputs
/// are a pure function of this value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ResolvedCommand {
    CorpusToy,
    CorpusChain { states: usize, s: f64, zipf_n: usize, len: usize, seed: Option<u64>, top_k: Option<usize> },
    Train {
        corpus: Option<PathBuf>,
        regime: String,
        block: usize,
        steps: usize,
        batch: usize,
        lr: f64,
        #[serde(default = "default_lr_floor")]
        lr_floor: f64,
        seed: u64,
        schedule: String,
        d_model: usize,
        layers: usize,
        heads: usize,
        d_ff: usize,
        param_seed: u64,
    },
    Decode {
        corpus: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        strategy: String,
        k: usize,
        block: usize,
        inner: String,
        ratio: f64,
        rounds: usize,
        temperature: Option<f64>,
        prompt: Option<String>,
        seed: u64,
        stop_on_eot: bool,
        compare_semi_ar_b1: bool,
    },
    AnalyzePplTable { s: f64, n_support: usize, max: usize },
    AnalyzeBound { s: f64, n_support: usize, n: usize },
    AnalyzeProfile { corpus: PathBuf, prompts: usize, seed: u64 },
    AnalyzeHomogenization { corpus: PathBuf },
    ReproduceToy,
    ReproduceTable2,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// Unix seconds at write time; informational only, never an input.
    created_unix: u64,
    #[serde(flatten)]
    command: ResolvedCommand,
}

pub fn save(command: &ResolvedCommand, out_dir: &Path) -> Result<()> {
    let manifest = Manifest {
        version: 1,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        command: command.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid("manifest", e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ResolvedCommand> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::invalid("manifest", e.to_string()))?;
    Ok(manifest.command)
}

fn default_lr_floor() -> f64 {
    1.0
}
