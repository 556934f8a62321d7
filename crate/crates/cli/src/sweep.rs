//! Multi-size, multi-seed sweeps and the `(P, L*)` run index.

use std::fs;
use std::path::{Path, PathBuf};

use cellscale_core::corpus::ExpressionMatrix;
use cellscale_core::fit::{write_points_csv, ScalingPoint};
use cellscale_core::model::{ModelConfig, Preset};
use cellscale_core::trainer::{train, RunRecord, TrainConfig, METADATA_FILE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_CSV: &str = "index.csv";
pub const DEFAULT_SEEDS: [u64; 3] = [7, 8, 9];

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub presets: Vec<Preset>,
    pub seeds: Vec<u64>,
    /// Seed is replaced per run.
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub preset: String,
    pub seed: u64,
    /// Relative to the index file.
    pub run_dir: String,
    pub param_count: u64,
    pub best_val_mse: f64,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub corpus: String,
    pub runs: Vec<IndexEntry>,
}

impl SweepIndex {
    pub fn points(&self) -> Vec<ScalingPoint> {
        self.runs
            .iter()
            .map(|r| {
                ScalingPoint::tagged(
                    r.param_count as f64,
                    r.best_val_mse,
                    run_dir_name_raw(&r.preset, r.seed),
                )
            })
            .collect()
    }

    /// Accepts the index file itself or the sweep directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(INDEX_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(CliError::io(&file))?;
        serde_json::from_str(&text).map_err(CliError::json(&file))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(self).map_err(CliError::json(&path))?;
        fs::write(&path, json + "\n").map_err(CliError::io(&path))?;
        write_points_csv(&self.points(), &dir.join(INDEX_CSV))?;
        Ok(())
    }
}

fn run_dir_name_raw(preset: &str, seed: u64) -> String {
    format!("{preset}_s{seed}")
}

pub fn run_dir_name(preset: Preset, seed: u64) -> String {
    run_dir_name_raw(preset.name(), seed)
}

/// Runs every `(preset, seed)` cell in order. Cells whose directory already
/// holds a metadata file are loaded instead of retrained.
pub fn run_sweep(
    spec: &SweepSpec,
    corpus: &ExpressionMatrix,
    mut progress: impl FnMut(&str),
) -> Result<SweepIndex> {
    if spec.presets.is_empty() || spec.seeds.is_empty() {
        return Err(CliError::Usage(
            "a sweep needs at least one preset and one seed".into(),
        ));
    }
    fs::create_dir_all(&spec.out_dir).map_err(CliError::io(&spec.out_dir))?;
    let mut runs = Vec::new();
    for &preset in &spec.presets {
        let model = ModelConfig::from_preset(preset, corpus.n_genes());
        for &seed in &spec.seeds {
            let name = run_dir_name(preset, seed);
            let dir = spec.out_dir.join(&name);
            let record = if dir.join(METADATA_FILE).exists() {
                progress(&format!("{name}: complete, skipping"));
                RunRecord::load(&dir)?
            } else {
                progress(&format!(
                    "{name}: training {} parameters",
                    model.param_count()
                ));
                let config = TrainConfig { seed, ..spec.train };
                train(&model, corpus, &config, Some(&dir))?.record
            };
            progress(&format!(
                "{name}: best val mse {:.6} at step {}",
                record.best_val_mse, record.best_step
            ));
            runs.push(IndexEntry {
                preset: preset.name().to_string(),
                seed,
                run_dir: name,
                param_count: record.param_count,
                best_val_mse: record.best_val_mse,
                best_step: record.best_step,
            });
        }
    }
    let index = SweepIndex {
        corpus: corpus.provenance().to_string(),
        runs,
    };
    index.save(&spec.out_dir)?;
    Ok(index)
}
