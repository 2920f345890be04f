//! Run configuration: one JSON document that carries every tunable the
//! pipeline commands need, so a run is reproducible from a single file.
//! Unknown fields are rejected and every section falls back to defaults,
//! so an empty object `{}` is a complete, valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vpr_core::{OptimConfig, WorldConfig};

use crate::{input, CliError};

/// Top-level configuration consumed by `synth` and `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub optim: OptimConfig,
    pub model: ModelSection,
    pub eval: EvalSection,
}

/// Query-model architecture: hidden layer widths and the init seed. The
/// input width comes from the raw-feature store and the output width from
/// the memory bank, so neither is configured here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_dims: vec![256], init_seed: 7 }
    }
}

/// Evaluation settings mirrored by the `eval` command's flags.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Geographic match radius in meters.
    pub threshold_m: f64,
    /// Recall depths, strictly ascending.
    pub ks: Vec<usize>,
    /// Frame-index match window for frame-based ground truth.
    pub frame_window: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { threshold_m: 25.0, ks: vec![1, 5, 10], frame_window: 0 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate().map_err(|e| input(format!("world config: {e}")))?;
        self.optim.validate().map_err(|e| input(format!("optim config: {e}")))?;
        if self.model.hidden_dims.iter().any(|&d| d == 0) {
            return Err(input("model config: hidden_dims must all be at least 1"));
        }
        if self.eval.ks.is_empty() {
            return Err(input("eval config: ks must not be empty"));
        }
        if self.eval.ks[0] == 0 {
            return Err(input("eval config: ks must start at 1 or above"));
        }
        if self.eval.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(input(format!("eval config: ks must be strictly ascending, got {:?}", self.eval.ks)));
        }
        if !self.eval.threshold_m.is_finite() || self.eval.threshold_m < 0.0 {
            return Err(input(format!("eval config: threshold_m must be finite and non-negative, got {}", self.eval.threshold_m)));
        }
        Ok(())
    }
}

/// Reads and fully validates a configuration before any work starts.
pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("read {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| input(format!("parse {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
