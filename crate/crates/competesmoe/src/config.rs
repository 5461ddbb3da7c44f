//! Run configuration: one JSON document wiring together the model shape,
//! the training algorithm and its knobs, and the data source.
//!
//! Every field has a default, so `{}` parses to the nano preset trained
//! with the competition schedule on the bundled synthetic corpus. Unknown
//! fields are rejected rather than silently ignored — a typo in a knob
//! name should fail loudly at load time, not run a different experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::model::{Layout, ModelConfig};
use crate::routing::RouterKind;
use crate::train::FinetuneConfig;

/// Training algorithm. Apart from `competesmoe` these differ only in the
/// router family they instantiate (and, for `stablemoe`, a phase switch);
/// the optimization loop is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Scheduled competition steps plus router distillation.
    Competesmoe,
    /// Vanilla trained linear router.
    Smoe,
    /// Frozen random router.
    SmoeFixed,
    /// Cosine router with a down-projection and learned temperature.
    Xmoe,
    /// Linear router trained in phase 1, frozen in phase 2.
    Stablemoe,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Competesmoe => "competesmoe",
            Algorithm::Smoe => "smoe",
            Algorithm::SmoeFixed => "smoe_fixed",
            Algorithm::Xmoe => "xmoe",
            Algorithm::Stablemoe => "stablemoe",
        }
    }

    /// Router family this algorithm trains when the model config does not
    /// pin one explicitly.
    pub fn default_router_kind(self) -> RouterKind {
        match self {
            Algorithm::Competesmoe => RouterKind::CompetitionProxy,
            Algorithm::Smoe => RouterKind::Linear,
            Algorithm::SmoeFixed => RouterKind::FixedRandom,
            Algorithm::Xmoe => RouterKind::CosineXmoe,
            Algorithm::Stablemoe => RouterKind::Stablemoe,
        }
    }

    /// Only the competition schedule reads λ (and α).
    pub fn uses_schedule(self) -> bool {
        matches!(self, Algorithm::Competesmoe)
    }
}

/// Optimization-loop knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// Per-layer, per-step probability of a competition step.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Task-loss weight on scheduled steps; `None` picks the layout
    /// default (5 for switch, 0.1 for glam).
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Training window length; at most the model's context.
    #[serde(default = "default_context")]
    pub context: usize,
    /// Steps between validation passes (which also drive best-checkpoint
    /// selection).
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub seed: u64,
    /// Fixed summation orders and serial reductions everywhere; equal
    /// (config, seed) runs are bitwise identical.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Global-norm gradient clip; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Fraction of steps spent in the router-training phase (stablemoe
    /// only).
    #[serde(default = "default_phase1_fraction")]
    pub phase1_fraction: f64,
    /// When set, routers outside the scheduled set receive no optimizer
    /// update at all on scheduled steps (moments and timestep untouched).
    #[serde(default)]
    pub strict_router_schedule: bool,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Competesmoe
}
fn default_lambda() -> f64 {
    0.05
}
fn default_base_lr() -> f64 {
    1e-3
}
fn default_steps() -> u64 {
    1000
}
fn default_batch_size() -> usize {
    8
}
fn default_context() -> usize {
    128
}
fn default_eval_interval() -> u64 {
    200
}
fn default_true() -> bool {
    true
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}
fn default_phase1_fraction() -> f64 {
    0.3
}

impl Default for TrainerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all trainer fields have defaults")
    }
}

impl TrainerConfig {
    /// Scheduled-step task-loss weight, resolving the layout default.
    pub fn resolved_alpha(&self, layout: Layout) -> f64 {
        self.alpha.unwrap_or(match layout {
            Layout::Switch => 5.0,
            Layout::Glam => 0.1,
        })
    }
}

/// Data source. `path: None` uses the bundled synthetic text stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Prefix length to load; 0 loads the whole file.
    #[serde(default = "default_max_bytes")]
    pub max_bytes: usize,
    #[serde(default)]
    pub fractions: SplitFractions,
}

fn default_max_bytes() -> usize {
    1_000_000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, max_bytes: default_max_bytes(), fractions: SplitFractions::default() }
    }
}

/// The full run description. Serializes to/from JSON losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Knobs for the `finetune` subcommand; ignored by plain training.
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Artifact directory; the CLI fills this from `--out` or
    /// `COMPETESMOE_OUT` when absent.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(&path.display().to_string(), &e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(&path.display().to_string(), &e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.trainer;
        if t.algorithm.uses_schedule() && !(t.lambda > 0.0 && t.lambda <= 1.0) {
            return Err(Error::config(
                "trainer.lambda",
                &format!("competesmoe requires λ in (0, 1], got {}", t.lambda),
            ));
        }
        if let Some(a) = t.alpha {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::config("trainer.alpha", &format!("must be finite and ≥ 0, got {a}")));
            }
        }
        if !(t.base_lr.is_finite() && t.base_lr > 0.0) {
            return Err(Error::config("trainer.base_lr", &format!("must be positive, got {}", t.base_lr)));
        }
        if t.steps == 0 {
            return Err(Error::config("trainer.steps", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if t.context == 0 {
            return Err(Error::config("trainer.context", "must be at least 1"));
        }
        if t.context > self.model.context {
            return Err(Error::config(
                "trainer.context",
                &format!("window of {} exceeds the model context {}", t.context, self.model.context),
            ));
        }
        if t.eval_interval == 0 {
            return Err(Error::config("trainer.eval_interval", "must be at least 1"));
        }
        if let Some(c) = t.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("trainer.grad_clip", &format!("must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&t.phase1_fraction) {
            return Err(Error::config(
                "trainer.phase1_fraction",
                &format!("must lie in [0, 1], got {}", t.phase1_fraction),
            ));
        }
        self.data.fractions.validate()?;
        if self.data.max_bytes > 0 && self.data.max_bytes < 100 {
            return Err(Error::config(
                "data.max_bytes",
                &format!("{} bytes cannot produce three non-empty splits of useful size", self.data.max_bytes),
            ));
        }
        Ok(())
    }

    /// The router family to instantiate: an explicit model-level choice
    /// wins, otherwise the algorithm's default.
    pub fn router_kind(&self) -> RouterKind {
        self.model.router.kind_or(self.trainer.algorithm.default_router_kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_nano_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.trainer.algorithm, Algorithm::Competesmoe);
        assert_eq!(cfg.trainer.lambda, 0.05);
        assert_eq!(cfg.trainer.eval_interval, 200);
        assert_eq!(cfg.trainer.grad_clip, Some(1.0));
        assert_eq!(cfg.data.max_bytes, 1_000_000);
        assert!(cfg.trainer.deterministic);
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let text = r#"{
            "model": {"layout": "glam", "n_layers": 4, "d_model": 32, "n_heads": 4,
                      "d_ff": 64, "n_experts": 8, "top_k": 1, "vocab_size": 97,
                      "context": 256,
                      "router": {"kind": "cosine_xmoe", "proj_dim": 8, "temperature_init": 0.2},
                      "activation": "gelu", "tied_embeddings": true},
            "trainer": {"algorithm": "xmoe", "lambda": 0.5, "alpha": 2.5,
                        "base_lr": 0.0007, "steps": 123, "batch_size": 3,
                        "context": 48, "eval_interval": 7, "seed": 99,
                        "deterministic": false, "grad_clip": null,
                        "phase1_fraction": 0.4, "strict_router_schedule": true},
            "data": {"path": "corpora/enwik8", "max_bytes": 5000,
                     "fractions": {"train": 0.8, "valid": 0.1, "test": 0.1}},
            "out_dir": "runs/exp1"
        }"#;
        let first: RunConfig = serde_json::from_str(text).unwrap();
        first.validate().unwrap();
        let reserialized = serde_json::to_string(&first).unwrap();
        let second: RunConfig = serde_json::from_str(&reserialized).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn competesmoe_rejects_lambda_outside_unit_interval() {
        for bad in [0.0, -0.1, 1.5] {
            let mut cfg = RunConfig::default();
            cfg.trainer.lambda = bad;
            let err = cfg.validate().unwrap_err();
            assert_eq!(err.exit_code(), 3);
            assert!(err.to_string().contains("trainer.lambda"), "got: {err}");
        }
        let mut cfg = RunConfig::default();
        cfg.trainer.lambda = 1.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn other_algorithms_ignore_lambda_and_alpha() {
        let mut cfg = RunConfig::default();
        cfg.trainer.algorithm = Algorithm::Smoe;
        cfg.trainer.lambda = 7.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"trainer": {"lamda": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn trainer_context_cannot_exceed_model_context() {
        let mut cfg = RunConfig::default();
        cfg.trainer.context = cfg.model.context + 1;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("trainer.context"), "got: {err}");
    }

    #[test]
    fn alpha_defaults_follow_the_layout() {
        let t = TrainerConfig::default();
        assert_eq!(t.resolved_alpha(Layout::Switch), 5.0);
        assert_eq!(t.resolved_alpha(Layout::Glam), 0.1);
        let pinned = TrainerConfig { alpha: Some(2.0), ..TrainerConfig::default() };
        assert_eq!(pinned.resolved_alpha(Layout::Switch), 2.0);
    }

    #[test]
    fn algorithms_map_to_router_families() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.router_kind(), RouterKind::CompetitionProxy);
        cfg.trainer.algorithm = Algorithm::SmoeFixed;
        assert_eq!(cfg.router_kind(), RouterKind::FixedRandom);
        // An explicit model-level router wins over the algorithm default.
        cfg.model.router.kind = Some(RouterKind::Linear);
        assert_eq!(cfg.router_kind(), RouterKind::Linear);
    }

    #[test]
    fn load_reports_path_qualified_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"trainer": {"algorithm": "nope"}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("run.json"), "got: {err}");
        let good = dir.path().join("ok.json");
        std::fs::write(&good, "{}").unwrap();
        assert!(RunConfig::load(&good).is_ok());
    }
}
