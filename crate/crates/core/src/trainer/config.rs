use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::CriticConfig;
use crate::datagen::TaskSpec;
use crate::error::{ensure, Error, Result};
use crate::objectives::RegMode;
use crate::seqmodel::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "gan-base")]
    GanBase,
    #[serde(rename = "gan-auto")]
    GanAuto,
    #[serde(rename = "gan-freq")]
    GanFreq,
    #[serde(rename = "seq2seq")]
    Seq2Seq,
}

impl ModelKind {
    /// Regularizer for the adversarial models.
    pub fn reg_mode(self) -> Option<RegMode> {
        match self {
            ModelKind::GanBase => Some(RegMode::Base),
            ModelKind::GanAuto => Some(RegMode::Auto),
            ModelKind::GanFreq => Some(RegMode::Freq),
            ModelKind::Seq2Seq => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GanBase => "gan-base",
            ModelKind::GanAuto => "gan-auto",
            ModelKind::GanFreq => "gan-freq",
            ModelKind::Seq2Seq => "seq2seq",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub start: usize,
    pub step: usize,
    /// Advance when critic accuracy falls below this.
    pub accuracy_threshold: f64,
    /// Advance after this many epochs at one length.
    pub patience: usize,
    /// Critic-only epochs after each advance.
    pub retrain_epochs: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start: 5,
            step: 2,
            accuracy_threshold: 0.55,
            patience: 40,
            retrain_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub factor: f64,
    pub every: usize,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { factor: 0.9, every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorShape {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GeneratorShape {
    fn default() -> Self {
        Self { hidden: 512, layers: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticShape {
    pub depth: usize,
    pub kernels: Vec<usize>,
    pub filters: usize,
    pub hidden: usize,
}

impl Default for CriticShape {
    fn default() -> Self {
        Self {
            depth: 1,
            kernels: vec![3, 7, 11],
            filters: 300,
            hidden: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p_drop: 0.2, rate: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_pairs: 10_000,
            test_pairs: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// Critic depth for `diagnose`.
    pub depth: usize,
    /// Critic steps between loss-ratio probes.
    pub probe_every: usize,
    pub probes: usize,
    /// Paired examples per probe.
    pub probe_pairs: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            probe_every: 100,
            probes: 10,
            probe_pairs: 512,
        }
    }
}

/// Every hyperparameter of a run. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub model: ModelKind,
    pub lambda: f64,
    pub clip: f64,
    pub lr_critic: f64,
    pub lr_generator: f64,
    pub lr_pretrain: f64,
    pub lr_seq2seq: f64,
    /// Critic updates per generator update.
    pub critic_ratio: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub probe_size: usize,
    pub curriculum: CurriculumConfig,
    pub decay: DecayConfig,
    pub generator: GeneratorShape,
    pub critic: CriticShape,
    pub noise: NoiseConfig,
    pub data: DataConfig,
    pub diagnose: DiagnoseConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::sort(20, 50),
            model: ModelKind::GanBase,
            lambda: 1.0,
            clip: 0.05,
            lr_critic: 5e-4,
            lr_generator: 1e-5,
            lr_pretrain: 1e-4,
            lr_seq2seq: 1e-4,
            critic_ratio: 15,
            epochs: 200,
            pretrain_epochs: 20,
            warmup_epochs: 10,
            batch_size: 64,
            probe_size: 256,
            curriculum: CurriculumConfig::default(),
            decay: DecayConfig::default(),
            generator: GeneratorShape::default(),
            critic: CriticShape::default(),
            noise: NoiseConfig::default(),
            data: DataConfig::default(),
            diagnose: DiagnoseConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_critic", self.lr_critic),
            ("lr_generator", self.lr_generator),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_seq2seq", self.lr_seq2seq),
        ] {
            ensure!(lr > 0.0 && lr.is_finite(), Config, "{name} must be positive, got {lr}");
        }
        ensure!(self.critic_ratio >= 1, Config, "critic_ratio must be at least 1");
        ensure!(self.lambda >= 0.0, Config, "lambda must be nonnegative, got {}", self.lambda);
        ensure!(self.clip > 0.0, Config, "clip must be positive, got {}", self.clip);
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.probe_size >= 1, Config, "probe_size must be at least 1");
        ensure!(self.curriculum.start >= 1 && self.curriculum.step >= 1, Config, "curriculum start and step must be positive");
        ensure!(self.decay.every >= 1 && self.decay.factor > 0.0, Config, "decay needs every >= 1 and factor > 0");
        ensure!(self.diagnose.probe_every >= 1 && self.diagnose.probe_pairs >= 1, Config, "diagnose intervals must be positive");
        ensure!(self.data.train_pairs >= 1 && self.data.test_pairs >= 1, Config, "datasets must be nonempty");
        self.generator_config().validate()?;
        self.critic_config(self.critic.depth).validate()?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.task.vocab().size()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: self.vocab_size(),
            hidden: self.generator.hidden,
            layers: self.generator.layers,
        }
    }

    pub fn critic_config(&self, depth: usize) -> CriticConfig {
        CriticConfig {
            vocab_size: self.vocab_size(),
            depth,
            kernels: self.critic.kernels.clone(),
            filters: self.critic.filters,
            hidden: self.critic.hidden,
        }
    }
}

/// Curriculum progress of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumState {
    pub length: usize,
    pub epochs_at_level: usize,
    pub accuracy: Option<f64>,
    pub max_length: usize,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig, max_length: usize) -> Self {
        let length = if cfg.enabled { cfg.start.min(max_length) } else { max_length };
        Self {
            length,
            epochs_at_level: 0,
            accuracy: None,
            max_length,
        }
    }

    pub fn complete(&self) -> bool {
        self.length >= self.max_length
    }
}

/// Steps the length up by `step` (capped at the maximum) when accuracy is
/// below `threshold` or `epochs_at_level` reached `patience`; the level
/// counter resets on advance.
pub fn curriculum_advance(
    state: &CurriculumState,
    critic_accuracy: f64,
    epochs_at_level: usize,
    step: usize,
    threshold: f64,
    patience: usize,
) -> CurriculumState {
    let mut next = state.clone();
    next.accuracy = Some(critic_accuracy);
    next.epochs_at_level = epochs_at_level;
    if !state.complete() && (critic_accuracy < threshold || epochs_at_level >= patience) {
        next.length = (state.length + step).min(state.max_length);
        next.epochs_at_level = 0;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(len: usize) -> CurriculumState {
        CurriculumState {
            length: len,
            epochs_at_level: 0,
            accuracy: None,
            max_length: 20,
        }
    }

    #[test]
    fn advance_examples() {
        assert_eq!(curriculum_advance(&at(5), 0.54, 3, 2, 0.55, 40).length, 7);
        let s = curriculum_advance(&at(5), 0.70, 40, 2, 0.55, 40);
        assert_eq!((s.length, s.epochs_at_level), (7, 0));
        let s = curriculum_advance(&at(5), 0.70, 10, 2, 0.55, 40);
        assert_eq!((s.length, s.epochs_at_level), (5, 10));
        assert_eq!(curriculum_advance(&at(19), 0.1, 0, 2, 0.55, 40).length, 20);
        assert_eq!(curriculum_advance(&at(20), 0.1, 0, 2, 0.55, 40).length, 20);
    }

    #[test]
    fn lengths_never_decrease() {
        let mut s = at(5);
        let mut prev = s.length;
        for e in 0..200 {
            let acc = ((e * 37) % 100) as f64 / 100.0;
            s = curriculum_advance(&s, acc, s.epochs_at_level + 1, 2, 0.55, 40);
            assert!(s.length >= prev && s.length <= 20);
            prev = s.length;
        }
        assert!(s.complete());
    }

    #[test]
    fn config_json_rules() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = TrainConfig::from_json(r#"{"model": "gan-freq", "lambda": 0.5}"#).unwrap();
        assert_eq!(partial.model, ModelKind::GanFreq);
        assert_eq!(partial.clip, 0.05);
        assert!(TrainConfig::from_json(r#"{"lamda": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"curriculum": {"start": 5, "bogus": 1}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr_critic": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"critic_ratio": 0}"#).is_err());
        assert_eq!("seq2seq".parse::<ModelKind>().unwrap(), ModelKind::Seq2Seq);
        assert!("gan".parse::<ModelKind>().is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.clip, 0.05);
        assert_eq!(c.lr_critic, 5e-4);
        assert_eq!(c.lr_generator, 1e-5);
        assert_eq!(c.critic_ratio, 15);
        assert_eq!(c.warmup_epochs, 10);
        assert_eq!((c.curriculum.start, c.curriculum.step, c.curriculum.patience), (5, 2, 40));
        assert_eq!((c.decay.factor, c.decay.every), (0.9, 10));
        assert_eq!((c.critic.filters, c.critic.kernels.clone()), (300, vec![3, 7, 11]));
    }
}
