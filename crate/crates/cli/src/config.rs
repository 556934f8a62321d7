//! TOML config file. Every key is optional; command-line flags win over the
//! file and the file wins over built-in defaults.
//!
//! ```toml
//! [train]
//! physical_batch = 4
//! grad_accum = 8
//! base_lr = 2.5e-4
//! steps = 2000
//! eval_every = 250
//!
//! [sweep]
//! presets = ["XXS", "TINY", "XS", "S"]
//! seeds = [7, 8, 9]
//!
//! [fit]
//! grid_size = 1000
//! ```

use std::fs;
use std::path::Path;

use cellscale_core::model::Preset;
use cellscale_core::trainer::TrainConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Training settings that can come from flags or the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    /// Fraction of genes masked per cell.
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// Cells per forward pass.
    #[arg(long)]
    pub physical_batch: Option<usize>,
    /// Forward passes accumulated per optimizer step.
    #[arg(long)]
    pub grad_accum: Option<usize>,
    /// Learning rate at an effective batch of 256; the applied rate is scaled
    /// linearly to the effective batch.
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Optimizer steps per run.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Steps between validation passes.
    #[arg(long)]
    pub eval_every: Option<u64>,
}

impl TrainOverrides {
    /// Fields set in `self` win over those set in `lower`.
    pub fn over(&self, lower: &TrainOverrides) -> TrainOverrides {
        TrainOverrides {
            mask_rate: self.mask_rate.or(lower.mask_rate),
            physical_batch: self.physical_batch.or(lower.physical_batch),
            grad_accum: self.grad_accum.or(lower.grad_accum),
            base_lr: self.base_lr.or(lower.base_lr),
            weight_decay: self.weight_decay.or(lower.weight_decay),
            clip_norm: self.clip_norm.or(lower.clip_norm),
            steps: self.steps.or(lower.steps),
            eval_every: self.eval_every.or(lower.eval_every),
        }
    }

    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        if let Some(v) = self.mask_rate {
            c.mask_rate = v;
        }
        if let Some(v) = self.physical_batch {
            c.physical_batch = v;
        }
        if let Some(v) = self.grad_accum {
            c.grad_accum = v;
        }
        if let Some(v) = self.base_lr {
            c.base_lr_reference = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.clip_norm {
            c.clip_norm = v;
        }
        if let Some(v) = self.steps {
            c.total_steps = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub presets: Option<Vec<Preset>>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub grid_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub train: TrainOverrides,
    pub sweep: SweepSection,
    pub fit: FitSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Defaults, then this file, then `flags`.
    pub fn train_config(&self, flags: &TrainOverrides) -> TrainConfig {
        flags.over(&self.train).apply(TrainConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file: ConfigFile = toml::from_str(
            "[train]\nsteps = 500\nbase_lr = 1e-3\n[sweep]\npresets = [\"XXS\", \"TINY\"]\n",
        )
        .unwrap();
        let flags = TrainOverrides {
            steps: Some(20),
            ..Default::default()
        };
        let c = file.train_config(&flags);
        assert_eq!(c.total_steps, 20);
        assert_eq!(c.base_lr_reference, 1e-3);
        assert_eq!(c.physical_batch, TrainConfig::default().physical_batch);
        assert_eq!(file.sweep.presets, Some(vec![Preset::Xxs, Preset::Tiny]));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ConfigFile>("[train]\nlearning_rate = 1.0\n").is_err());
    }
}
