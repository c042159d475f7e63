use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub level0_entry_filters: usize,
    pub level0_block_filters: usize,
    pub level1_block_filters: usize,
    /// Level-0 inner reduction factor `d`.
    pub level0_inner_reduction: usize,
    pub level0_entry_pool: usize,
    pub blocks_per_stage: usize,
    pub dropout_rate: f64,
    pub groupnorm_groups: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: [256, 256, 256],
            num_classes: 7,
            level0_entry_filters: 32,
            level0_block_filters: 64,
            level1_block_filters: 128,
            level0_inner_reduction: 4,
            level0_entry_pool: 2,
            blocks_per_stage: 2,
            dropout_rate: 0.05,
            groupnorm_groups: 8,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Default architecture at a smaller cubic input size.
    pub fn desk(size: usize, num_classes: usize) -> Self {
        Self {
            input_shape: [size; 3],
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("level0_entry_filters", self.level0_entry_filters),
            ("level0_block_filters", self.level0_block_filters),
            ("level1_block_filters", self.level1_block_filters),
            ("level0_inner_reduction", self.level0_inner_reduction),
            ("level0_entry_pool", self.level0_entry_pool),
            ("blocks_per_stage", self.blocks_per_stage),
            ("groupnorm_groups", self.groupnorm_groups),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        let f = self.level0_entry_pool * self.level0_inner_reduction;
        if self.input_shape.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::Config(format!(
                "input_shape {:?} must be divisible by entry_pool x inner_reduction = {f}",
                self.input_shape
            )));
        }
        for w in [self.level0_entry_filters, self.level0_block_filters, self.level1_block_filters] {
            if w % self.groupnorm_groups != 0 {
                return Err(Error::Config(format!(
                    "groupnorm_groups {} does not divide filter count {w}",
                    self.groupnorm_groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial size at which level 0 runs.
    pub fn level0_dims(&self) -> [usize; 3] {
        self.input_shape.map(|s| s / self.level0_entry_pool)
    }
}
