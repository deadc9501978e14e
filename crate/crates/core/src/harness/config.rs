//! Run configuration: one structured file (TOML) with every knob of the
//! pre-training pipeline, validated against module preconditions at load
//! time. Unknown keys are rejected.
//!
//! The run seed drives every random choice (model initialization, epoch
//! shuffles, masking, negative sampling); the `model.seed` field in a
//! config file is superseded by the mandatory `--seed` at run time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{InjectionScope, SiMode};
use crate::model::{PoolingMode, TransformerConfig};
use crate::objectives::CkaDirection;
use crate::routing::NonFfnPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Trelm,
    MlmBaseline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Trelm => write!(f, "trelm"),
            Mode::MlmBaseline => write!(f, "mlm_baseline"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    pub mask_rate: f64,
    /// Loss mix: `theta * mlm + (1 - theta) * cka`.
    pub theta: f64,
    /// Initial memory-mixing coefficient.
    pub lambda0: f64,
    /// Per-epoch decay rate of the mixing coefficient.
    pub beta: f64,
    /// Local-memory moving-average discount.
    pub gamma: f64,
    /// Half window of the local-memory context mean.
    pub half_window: usize,
    /// Injection targets kept per sentence by importance rank.
    pub top_k: usize,
    /// Mention count at or below which an entity counts as long-tail.
    pub long_tail_threshold: usize,
    /// Contrastive negatives per prediction position.
    pub negatives: usize,
    /// Riemann steps of the attribution integral.
    pub riemann_steps: usize,
    /// Fraction of FFN neurons per layer selected into knowledge paths.
    pub select_fraction: f64,
    /// Recompute knowledge paths every this many batches.
    pub recompute_every: usize,
    pub non_ffn_policy: NonFfnPolicy,
    /// Disable to train with full updates (the selective-update ablation).
    pub routing_enabled: bool,
    pub pooling: PoolingMode,
    pub si_mode: SiMode,
    pub injection_scope: InjectionScope,
    pub cka_direction: CkaDirection,
    /// Divide the local-memory window sum by `2k + r - l` instead of the
    /// actual position count.
    pub literal_local_normalizer: bool,
    /// Fraction of triples held out of the training corpus for probing.
    pub holdout_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            mode: Mode::Trelm,
            seed: 0,
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            mask_rate: 0.15,
            theta: 0.5,
            lambda0: 0.5,
            beta: 2.0,
            gamma: 0.1,
            half_window: 16,
            top_k: 2,
            long_tail_threshold: 5,
            negatives: 10,
            riemann_steps: 20,
            select_fraction: 0.1,
            recompute_every: 1,
            non_ffn_policy: NonFfnPolicy::Full,
            routing_enabled: true,
            pooling: PoolingMode::Mean,
            si_mode: SiMode::ReciprocalCosine,
            injection_scope: InjectionScope::Union,
            cka_direction: CkaDirection::Both,
            literal_local_normalizer: false,
            holdout_frac: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.lr <= 0.0 {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.mask_rate) || self.mask_rate == 0.0 {
            return bad(format!("mask_rate must be in (0,1), got {}", self.mask_rate));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must be in [0,1], got {}", self.theta));
        }
        crate::memory_bank::MixSchedule::new(self.lambda0, self.beta)?;
        if !(0.0..1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return bad(format!("gamma must be in (0,1), got {}", self.gamma));
        }
        if self.long_tail_threshold < 1 {
            return bad("long_tail_threshold must be >= 1".into());
        }
        if self.negatives < 1 {
            return bad("negatives must be >= 1".into());
        }
        if self.riemann_steps < 1 {
            return bad("riemann_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.select_fraction) || self.select_fraction == 0.0 {
            return bad(format!("select_fraction must be in (0,1], got {}", self.select_fraction));
        }
        if self.recompute_every < 1 {
            return bad("recompute_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return bad(format!("holdout_frac must be in [0,1), got {}", self.holdout_frac));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }
}
