//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::StreamMode;
use crate::aggregate::AggregationConfig;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::learners::{HyperParams, LossSwitches};
use crate::pet::PetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub mode: StreamMode,
    /// Classes streamed to the learners.
    pub classes: usize,
    /// Extra classes used only to pretrain the surrogate backbone.
    pub pretext_classes: usize,
    pub sessions: usize,
    /// Classes in the first session (class-incremental mode).
    pub base_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Standard deviation of class-center coordinates.
    pub center_scale: f64,
    /// Per-session domain shift (domain-incremental mode).
    pub shift: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            mode: StreamMode::Cil,
            classes: 16,
            pretext_classes: 8,
            sessions: 4,
            base_classes: 4,
            samples_per_class: 50,
            test_per_class: 50,
            spread: 0.5,
            center_scale: 1.0,
            shift: 0.5,
        }
    }
}

/// Switches that remove one component each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_diag: bool,
    pub disable_rdn: bool,
    pub disable_cos: bool,
    pub disable_cross: bool,
    /// Both transfer terms of the slow objective.
    pub disable_slow_transfer: bool,
    /// Slow learner only; no fast track.
    pub disable_fast: bool,
    /// Predict from cosine-classifier logits instead of projection heads.
    pub disable_heads: bool,
}

impl Ablation {
    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            diag: !(self.disable_diag || self.disable_slow_transfer),
            rdn: !(self.disable_rdn || self.disable_slow_transfer),
            cos: !self.disable_cos,
            cross: !self.disable_cross,
        }
    }
}

/// Thresholds checked by `run --assert`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expectations {
    /// Lower bound on the final aggregated accuracy.
    pub min_final_accuracy: f64,
    /// Aggregated accuracy may trail the weaker single learner by at most this much.
    pub aggregate_margin: f64,
}

impl Default for Expectations {
    fn default() -> Self {
        Expectations { min_final_accuracy: 0.0, aggregate_margin: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub pet: PetConfig,
    pub learner: HyperParams,
    pub head: HeadConfig,
    pub aggregation: AggregationConfig,
    pub stream: StreamConfig,
    pub ablation: Ablation,
    pub expect: Expectations,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            pet: PetConfig::default(),
            learner: HyperParams::default(),
            head: HeadConfig::default(),
            aggregation: AggregationConfig::default(),
            stream: StreamConfig::default(),
            ablation: Ablation::default(),
            expect: Expectations::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stream;
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds the largest TOML integer", self.seed));
        }
        if s.sessions == 0 {
            return bad("stream.sessions must be at least 1".into());
        }
        if s.samples_per_class == 0 || s.test_per_class == 0 {
            return bad("stream.samples_per_class and stream.test_per_class must be positive".into());
        }
        match s.mode {
            StreamMode::Cil => {
                let rest = s.classes.checked_sub(s.base_classes);
                let ok = match (rest, s.sessions) {
                    (Some(0), 1) => s.base_classes >= 1,
                    (Some(r), n) if n > 1 => s.base_classes >= 1 && r > 0 && r % (n - 1) == 0,
                    _ => false,
                };
                if !ok {
                    return bad(format!("stream: {} classes cannot be split into a base of {} plus {} equal sessions", s.classes, s.base_classes, s.sessions - 1));
                }
            }
            StreamMode::Dil => {
                if s.sessions < 2 {
                    return bad("stream: domain-incremental mode needs at least 2 sessions".into());
                }
                if !(s.shift >= 0.0 && s.shift.is_finite()) {
                    return bad("stream.shift must be a nonnegative real".into());
                }
            }
        }
        if s.classes < 2 || s.pretext_classes < 2 {
            return bad("stream.classes and stream.pretext_classes must be at least 2".into());
        }
        if !(s.spread > 0.0 && s.center_scale > 0.0) {
            return bad("stream.spread and stream.center_scale must be positive".into());
        }
        let e = &self.expect;
        if !((0.0..=1.0).contains(&e.min_final_accuracy) && e.aggregate_margin >= 0.0) {
            return bad("expect.min_final_accuracy must lie in [0, 1] and expect.aggregate_margin must be nonnegative".into());
        }
        let b = &self.backbone;
        if b.input_width == 0 || b.tokens == 0 || b.width < 2 || b.hidden == 0 {
            return bad(format!("backbone extents invalid: {b:?}"));
        }
        if self.pretrain.batch_size == 0 {
            return bad("pretrain.batch_size must be positive".into());
        }
        if !(self.aggregation.gamma >= 0.0 && self.aggregation.gamma.is_finite()) {
            return bad("aggregation.gamma must be a nonnegative real".into());
        }
        if self.pet.kind == crate::pet::PetKind::Adapter && self.pet.rank == 0 {
            return bad("pet.rank must be at least 1".into());
        }
        if !(self.pet.init_sigma > 0.0) {
            return bad("pet.init_sigma must be positive".into());
        }
        self.learner.validate()?;
        self.head.validate()
    }

    /// Everything that determines the surrogate backbone and data stream.
    /// Configs with equal keys can share one prepared experiment.
    pub fn preparation_key(&self) -> String {
        format!("{}|{:?}|{:?}|{:?}", self.seed, self.backbone, self.pretrain, self.stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.head.sigma = Some(0.5);
        cfg.ablation.disable_cos = true;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_keys_and_sections() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 7\nlearner.lambda_cos = 10.0\n[stream]\nmode = \"dil\"\nclasses = 6\n[aggregation]\nmode = \"max\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.learner.lambda_cos, 10.0);
        assert_eq!(cfg.stream.mode, StreamMode::Dil);
        assert_eq!(cfg.aggregation.mode, crate::aggregate::AggregationMode::Max);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["sed = 1", "[learner]\nlamda_cos = 1.0", "[stream]\nmode = \"til\""] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        for text in ["[stream]\nbase_classes = 3", "[learner]\ntau = 0.0", "[head]\nbeta_grid = []", "[stream]\nmode = \"dil\"\nsessions = 1", "[expect]\nmin_final_accuracy = 1.5", "[expect]\naggregate_margin = -0.1"] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn ablation_maps_to_switches() {
        let a = Ablation { disable_slow_transfer: true, disable_cross: true, ..Ablation::default() };
        assert_eq!(a.switches(), LossSwitches { diag: false, rdn: false, cos: true, cross: false });
    }
}
