//! Training settings resolved from defaults, an optional TOML file and flags,
//! in that order of precedence.

use std::path::Path;

use serde::Deserialize;
use surfseq::resample::DEFAULT_POLICY;
use surfseq::train::{Optimizer, TrainConfig, DEFAULT_FINETUNE_ITERATIONS, DEFAULT_FINETUNE_LR};

/// Every field is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overlay {
    pub optimizer: Option<Optimizer>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub augmentation: Option<Vec<f64>>,
    pub dropout_p: Option<f64>,
    pub balanced_sampling: Option<bool>,
    pub val_every: Option<usize>,
    pub patch_order: Option<u32>,
}

#[derive(Debug)]
pub enum ConfigError {
    Read(String),
    Parse(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(m) | ConfigError::Parse(m) => f.write_str(m),
        }
    }
}

impl Overlay {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {}", path.display(), e.message())))
    }

    /// `other` wins wherever it sets a value.
    pub fn then(self, other: Overlay) -> Overlay {
        Overlay {
            optimizer: other.optimizer.or(self.optimizer),
            learning_rate: other.learning_rate.or(self.learning_rate),
            momentum: other.momentum.or(self.momentum),
            batch_size: other.batch_size.or(self.batch_size),
            iterations: other.iterations.or(self.iterations),
            augmentation: other.augmentation.or(self.augmentation),
            dropout_p: other.dropout_p.or(self.dropout_p),
            balanced_sampling: other.balanced_sampling.or(self.balanced_sampling),
            val_every: other.val_every.or(self.val_every),
            patch_order: other.patch_order.or(self.patch_order),
        }
    }

    /// Apply over the defaults. Fine-tuning runs default to the shorter
    /// schedule and smaller learning rate.
    pub fn resolve(&self, seed: u64, threads: usize, finetune: bool) -> TrainConfig {
        let base = TrainConfig::default();
        let (lr, iterations) = if finetune {
            (DEFAULT_FINETUNE_LR, DEFAULT_FINETUNE_ITERATIONS)
        } else {
            (base.learning_rate, base.iterations)
        };
        TrainConfig {
            optimizer: self.optimizer.unwrap_or(base.optimizer),
            learning_rate: self.learning_rate.unwrap_or(lr),
            momentum: self.momentum.unwrap_or(base.momentum),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            iterations: self.iterations.unwrap_or(iterations),
            augmentation: self.augmentation.clone().unwrap_or_else(|| DEFAULT_POLICY.to_vec()),
            dropout_p: self.dropout_p.unwrap_or(base.dropout_p),
            balanced_sampling: self.balanced_sampling.unwrap_or(base.balanced_sampling),
            val_every: self.val_every.unwrap_or(base.val_every),
            seed,
            threads,
            ..base
        }
    }
}

/// Patch order used when none is given: ico2 patches on ico6 grids, and
/// never more than three levels below the grid.
pub fn default_patch_order(grid_order: u32) -> u32 {
    grid_order.saturating_sub(3).min(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: Overlay = toml::from_str("learning_rate = 0.5\nbatch_size = 4\n").unwrap();
        let flags = Overlay {
            batch_size: Some(8),
            ..Overlay::default()
        };
        let c = file.then(flags).resolve(3, 1, false);
        assert_eq!((c.learning_rate, c.batch_size, c.seed), (0.5, 8, 3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Overlay>("learning_rat = 0.5").is_err());
    }

    #[test]
    fn finetune_defaults() {
        let c = Overlay::default().resolve(0, 1, true);
        assert_eq!((c.learning_rate, c.iterations), (1e-4, 1000));
        assert_eq!(c.augmentation, DEFAULT_POLICY.to_vec());
    }

    #[test]
    fn patch_order_defaults() {
        assert_eq!(default_patch_order(6), 2);
        assert_eq!(default_patch_order(4), 1);
        assert_eq!(default_patch_order(2), 0);
    }
}
