//! Experiment configuration: the JSON schema tying together source data,
//! model settings, stream assembly, and adaptation method.
//!
//! Configs are fail-closed: unknown keys are rejected and every field is
//! validated before any computation starts.

use crate::adapt::AdaptConfig;
use crate::models::{NormKind, DEFAULT_GROUPS, HIDDEN_WIDTH};
use crate::shiftgen::{SourceSpec, StreamSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable consulted for the default output directory.
pub const OUT_DIR_ENV: &str = "TTALAB_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Normalization flavor by short name, as it appears in configs and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormName {
    Bn,
    Gn,
    Ln,
}

impl NormName {
    pub fn name(&self) -> &'static str {
        match self {
            NormName::Bn => "bn",
            NormName::Gn => "gn",
            NormName::Ln => "ln",
        }
    }

    pub fn parse(s: &str) -> Option<NormName> {
        match s {
            "bn" => Some(NormName::Bn),
            "gn" => Some(NormName::Gn),
            "ln" => Some(NormName::Ln),
            _ => None,
        }
    }

    pub fn to_kind(self, group_count: usize) -> NormKind {
        match self {
            NormName::Bn => NormKind::BatchTest,
            NormName::Gn => NormKind::Group(group_count),
            NormName::Ln => NormKind::Layer,
        }
    }
}

/// Model construction and pretraining settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub norm: NormName,
    /// Groups for `gn`; must divide the hidden width.
    pub group_count: usize,
    /// Freeze the deepest norm layer's affine parameters for adaptation.
    pub freeze_top: bool,
    /// Checkpoint path: loaded when `pretrain` is false, written after
    /// pretraining when `pretrain` is true.
    pub checkpoint: Option<PathBuf>,
    /// Pretrain from scratch (otherwise a checkpoint must exist).
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            norm: NormName::Gn,
            group_count: DEFAULT_GROUPS,
            freeze_top: true,
            checkpoint: None,
            pretrain: true,
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
        }
    }
}

/// Top-level experiment description; one run per seed in `seeds`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: SourceSpec,
    pub model: ModelConfig,
    pub stream: StreamSpec,
    pub adapt: AdaptConfig,
    /// Output directory; falls back to $TTALAB_OUT, then "./out".
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: SourceSpec::default(),
            model: ModelConfig::default(),
            stream: StreamSpec::default(),
            adapt: AdaptConfig::default(),
            out_dir: None,
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Validates every field before any computation (fail-closed).
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let s = &self.source;
        if s.class_count < 2 {
            return bad(format!("class_count {} < 2", s.class_count));
        }
        if s.dim == 0 || s.n_per_class == 0 {
            return bad("source dim and n_per_class must be positive".into());
        }
        if !(s.separation.is_finite() && s.separation > 0.0) {
            return bad(format!("separation {} must be finite and > 0", s.separation));
        }
        let m = &self.model;
        if m.group_count == 0 || HIDDEN_WIDTH % m.group_count != 0 {
            return bad(format!(
                "group_count {} must divide the hidden width {HIDDEN_WIDTH}",
                m.group_count
            ));
        }
        if m.pretrain {
            if m.pretrain_epochs == 0 {
                return bad("pretrain_epochs must be positive".into());
            }
            if !(m.pretrain_lr.is_finite() && m.pretrain_lr > 0.0) {
                return bad(format!("pretrain_lr {} must be finite and > 0", m.pretrain_lr));
            }
        } else if m.checkpoint.is_none() {
            return bad("pretrain disabled but no checkpoint path given".into());
        }
        let t = &self.stream;
        if t.kinds.is_empty() {
            return bad("stream needs at least one corruption kind".into());
        }
        if !(1..=5).contains(&t.severity) {
            return bad(format!("severity {} outside 1..=5", t.severity));
        }
        if t.batch_size == 0 || t.m_per_step == 0 {
            return bad("batch_size and m_per_step must be positive".into());
        }
        if t.steps == Some(0) {
            return bad("steps must be positive when given".into());
        }
        if !(self.stream.imbalance_ratio >= 1.0) {
            return bad(format!(
                "imbalance_ratio {} must be >= 1 (or \"inf\")",
                self.stream.imbalance_ratio
            ));
        }
        self.adapt
            .validate(s.class_count)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        Ok(())
    }

    pub fn norm_kind(&self) -> NormKind {
        self.model.norm.to_kind(self.model.group_count)
    }

    /// Output directory after applying the environment fallback.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Method;
    use crate::shiftgen::CorruptionKind;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let nested = r#"{"stream": {"severity": 3, "typo_field": true}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(nested).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"adapt": {"method": "tent"}, "seeds": [1, 2]}"#).unwrap();
        assert_eq!(cfg.adapt.method, Method::Tent);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.stream.batch_size, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn imbalance_ratio_accepts_inf_string() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"stream": {"imbalance_ratio": "inf"}}"#).unwrap();
        assert!(cfg.stream.imbalance_ratio.is_infinite());
        // And it survives a round-trip through JSON.
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn imbalance_ratio_rejects_garbage_string() {
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"stream": {"imbalance_ratio": "huge"}}"#)
                .is_err()
        );
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.stream.severity = 6;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.model.group_count = 7; // does not divide 64
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.stream.imbalance_ratio = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.model.pretrain = false; // no checkpoint to load
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.stream.kinds = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn norm_kind_mapping() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.norm = NormName::Bn;
        assert_eq!(cfg.norm_kind(), NormKind::BatchTest);
        cfg.model.norm = NormName::Gn;
        cfg.model.group_count = 4;
        assert_eq!(cfg.norm_kind(), NormKind::Group(4));
        cfg.model.norm = NormName::Ln;
        assert_eq!(cfg.norm_kind(), NormKind::Layer);
    }

    #[test]
    fn mixed_stream_config_parses() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"stream": {"kinds": ["gaussian_noise", "feature_scale",
                 "constant_shift", "feature_dropout"], "severity": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.stream.kinds.len(), 4);
        assert_eq!(cfg.stream.kinds[3], CorruptionKind::FeatureDropout);
    }
}
