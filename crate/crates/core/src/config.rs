//! Scan configuration.

use crate::error::{Error, Result};
use crate::models::ModelKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// False discovery rate for the BH step-up.
    pub alpha: f64,
    /// Minimum observed metric difference for a selected task.
    pub gamma: f64,
    /// Minimum patient count per cell of the sample size gate.
    pub n_thr: usize,
    /// AUC a model must strictly exceed in the model fit gate.
    pub c_thr: f64,
    pub confidence: f64,
    pub b_bootstrap: usize,
    pub b_permutation: usize,
    /// Region share bounds as fractions of current-period validation samples.
    pub share_lower: f64,
    pub share_upper: f64,
    pub model_kind: ModelKind,
    /// Depth cap for sub-population trees; `None` grows until the leaf-size limit.
    pub subpop_max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            gamma: 0.01,
            n_thr: 25,
            c_thr: 0.5,
            confidence: 0.90,
            b_bootstrap: 2000,
            b_permutation: 2000,
            share_lower: 0.01,
            share_upper: 0.75,
            model_kind: ModelKind::LogisticRegression,
            subpop_max_depth: None,
            seed: 0,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.b_bootstrap == 0 || self.b_permutation == 0 {
            return bad("resampling iteration counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.share_lower)
            || !(0.0..=1.0).contains(&self.share_upper)
            || self.share_lower > self.share_upper
        {
            return bad("share bounds must satisfy 0 <= lower <= upper <= 1");
        }
        if self.gamma.is_nan() || self.c_thr.is_nan() {
            return bad("gamma and c_thr must be numbers");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
