//! Flat, commented TOML configuration for training runs and experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{make_schedule, DenoiseMixing};
use crate::error::{Error, Result};
use crate::evaluation::{DecodeConfig, Smoothing};
use crate::model::{AdamWConfig, LrCurve, ModelConfig};
use crate::noising::NoiseConfig;
use crate::synth::SynthConfig;
use crate::training::{DenoiseSampling, Mode, RunConfig, Seeds};

/// Every key of a run or pipeline config file. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub total_steps: u64,
    pub batch_size_tokens: usize,

    pub initial_lr: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    /// Defaults to `2/15` of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub reset_optimizer: bool,

    pub wd: f64,
    pub wb: f64,
    pub sk: usize,
    pub mask_symbol: String,
    pub mixing: DenoiseMixing,
    pub denoise_sampling: DenoiseSampling,
    pub temperature: f64,

    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,

    /// Defaults to `total_steps / 20`.
    pub checkpoint_every: Option<u64>,
    pub keep_checkpoints: usize,
    pub average_last: usize,

    pub bpe_merges: usize,
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len_factor: f64,
    pub bleu_smoothing: Smoothing,

    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub test_source: Option<PathBuf>,
    pub test_target: Option<PathBuf>,
    pub synth_vocab: usize,
    pub synth_train_pairs: usize,
    pub synth_test_pairs: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_classes: usize,
    /// Fixes the synthetic task independently of the training seed.
    pub synth_seed: u64,

    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(0);
        let n = NoiseConfig::default();
        let o = AdamWConfig::default();
        let d = DecodeConfig::default();
        let s = SynthConfig::default();
        Self {
            seed: 1,
            mode: Mode::Dot,
            total_steps: 3000,
            batch_size_tokens: 256,
            initial_lr: 1e-7,
            peak_lr: 3e-4,
            floor_lr: 0.0,
            warmup_steps: None,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            reset_optimizer: true,
            wd: n.wd,
            wb: n.wb,
            sk: n.sk,
            mask_symbol: n.mask_symbol,
            mixing: DenoiseMixing::Alternate,
            denoise_sampling: DenoiseSampling::Temperature,
            temperature: 2.0,
            layers: m.layers,
            model_dim: m.model_dim,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            dropout: m.dropout,
            label_smoothing: m.label_smoothing,
            max_positions: m.max_positions,
            checkpoint_every: None,
            keep_checkpoints: 10,
            average_last: 10,
            bpe_merges: 200,
            beam_size: d.beam_size,
            length_penalty: d.length_penalty,
            max_len_factor: d.max_len_factor,
            bleu_smoothing: Smoothing::None,
            train_source: None,
            train_target: None,
            test_source: None,
            test_target: None,
            synth_vocab: s.vocab_size,
            synth_train_pairs: s.train_pairs,
            synth_test_pairs: s.test_pairs,
            synth_min_len: s.min_len,
            synth_max_len: s.max_len,
            synth_classes: s.classes,
            synth_seed: s.seed,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The `seed` key of a config file, if it sets one.
    pub fn explicit_seed(text: &str) -> Option<u64> {
        let table: toml::Table = toml::from_str(text).ok()?;
        table
            .get("seed")?
            .as_integer()
            .and_then(|s| u64::try_from(s).ok())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            wd: self.wd,
            wb: self.wb,
            sk: self.sk,
            mask_symbol: self.mask_symbol.clone(),
            ..NoiseConfig::default()
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            vocab_size,
            max_positions: self.max_positions,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len_factor: self.max_len_factor,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.synth_vocab,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            train_pairs: self.synth_train_pairs,
            test_pairs: self.synth_test_pairs,
            classes: self.synth_classes,
            seed: self.synth_seed,
        }
    }

    pub fn lr_curve(&self) -> LrCurve {
        let base = LrCurve::for_total(self.total_steps);
        let warmup_steps = self.warmup_steps.unwrap_or(base.warmup_steps);
        LrCurve {
            initial_lr: self.initial_lr,
            peak_lr: self.peak_lr,
            warmup_steps,
            decay_steps: self.total_steps.saturating_sub(warmup_steps).max(1),
            floor_lr: self.floor_lr,
        }
    }

    /// The trainer configuration for `mode` over a vocabulary of `vocab_size`.
    pub fn run_config(
        &self,
        mode: Mode,
        vocab_size: usize,
        output_dir: Option<PathBuf>,
    ) -> Result<RunConfig> {
        let cfg = RunConfig {
            schedule: make_schedule(self.total_steps, self.lr_curve())?,
            noise: self.noise(),
            model: self.model(vocab_size),
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
            },
            mode,
            seeds: Seeds::from_global(self.seed),
            batch_size_tokens: self.batch_size_tokens,
            mixing: self.mixing,
            denoise_sampling: self.denoise_sampling,
            temperature: self.temperature,
            checkpoint_every: self
                .checkpoint_every
                .unwrap_or((self.total_steps / 20).max(1)),
            keep_checkpoints: self.keep_checkpoints,
            average_last: self.average_last,
            reset_optimizer: self.reset_optimizer,
            output_dir,
            stop_after: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_with_comments() {
        let c = ExperimentConfig::from_toml(
            "# short run\ntotal_steps = 300\nmode = \"baseline\"\nbleu_smoothing = \"AddOne\"\n",
        )
        .unwrap();
        assert_eq!(c.total_steps, 300);
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.wd, 0.1);
        let r = c.run_config(Mode::Dot, 40, None).unwrap();
        assert_eq!(r.schedule.denoise_steps, 100);
        assert_eq!(r.checkpoint_every, 15);
        assert_eq!(ExperimentConfig::explicit_seed("total_steps = 300"), None);
        assert_eq!(ExperimentConfig::explicit_seed("seed = 7"), Some(7));
    }

    #[test]
    fn unknown_keys_and_bad_steps_rejected() {
        assert!(ExperimentConfig::from_toml("totl_steps = 3").is_err());
        let c = ExperimentConfig::from_toml("total_steps = 2").unwrap();
        assert!(matches!(
            c.run_config(Mode::Dot, 40, None),
            Err(Error::Config(_))
        ));
    }
}
