//! Flat, fully serialisable run configuration with named presets.
//!
//! Every knob of a run lives in one JSON object with no nesting so that two
//! configs diff line by line. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SynthSpec, EOS, PAD};
use crate::encoders::{TextEncoderConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{FinetuneConfig, ProbeConfig};
use crate::model::ModelConfig;
use crate::objectives::Denominator;
use crate::peft::{AdapterConfig, AttnTarget, FreezePolicy, Ia3Target};
use crate::prompt_tuning::PromptTuneConfig;
use crate::training::{AdamWConfig, PretrainConfig, ScheduleConfig, SgdConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CLEFT_SEED";

/// Prompt context length used when none is configured.
pub const DEFAULT_CONTEXT_LENGTH: usize = 30;

fn default_context_length() -> usize {
    DEFAULT_CONTEXT_LENGTH
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    None,
    Lora,
    Ia3,
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// 1 for `pretrain`, 2 for `prompt-tune`; each command refuses the other.
    pub stage: u8,
    pub data_dir: String,
    pub out_dir: String,

    pub n_classes: usize,
    pub image_size: usize,
    pub noise_std: f32,
    pub samples_per_class: usize,
    pub attributes: bool,
    pub bare_caption_fraction: f64,

    pub text_d_model: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub max_seq_len: usize,
    pub unlock_positional: bool,
    pub vision_d_model: usize,
    pub vision_heads: usize,
    pub vision_layers: usize,
    pub patch_size: usize,
    pub vision_final_layer_norm: bool,
    pub d_joint: usize,
    pub tau_init: f32,
    pub denominator: Denominator,

    pub adapter: AdapterKind,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_targets: Vec<AttnTarget>,
    pub ia3_targets: Vec<Ia3Target>,
    pub ia3_allow_query: bool,
    pub prefix_length: usize,
    /// `stage1`, `freeze-lm` or `full-ft-lm`.
    pub freeze_policy: String,

    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub eval_interval: usize,

    /// Falls back to [`DEFAULT_CONTEXT_LENGTH`] when the key is absent.
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    pub prompt_batch_size: usize,
    pub prompt_steps: usize,
    pub prompt_warmup_steps: usize,
    pub prompt_lr: f64,
    pub prompt_momentum: f64,
    pub prompt_eval_interval: usize,

    pub probe_batch_size: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_weight_decay: f64,
    pub ft_steps: usize,
    pub ft_lr: f64,
}

impl RunConfig {
    /// Desk-scale defaults used by the tests.
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            seed: 0,
            stage: 1,
            data_dir: "data".into(),
            out_dir: "runs/toy".into(),
            n_classes: 4,
            image_size: 16,
            noise_std: 0.2,
            samples_per_class: 200,
            attributes: true,
            bare_caption_fraction: 0.25,
            text_d_model: 32,
            text_heads: 4,
            text_layers: 2,
            max_seq_len: 40,
            unlock_positional: false,
            vision_d_model: 32,
            vision_heads: 4,
            vision_layers: 2,
            patch_size: 4,
            vision_final_layer_norm: false,
            d_joint: 32,
            tau_init: 0.07,
            denominator: Denominator::Inclusive,
            adapter: AdapterKind::Lora,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: vec![AttnTarget::Q, AttnTarget::V],
            ia3_targets: vec![Ia3Target::K, Ia3Target::V, Ia3Target::Ffn],
            ia3_allow_query: false,
            prefix_length: 4,
            freeze_policy: "stage1".into(),
            batch_size: 16,
            steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.2,
            eval_interval: 200,
            context_length: 8,
            prompt_batch_size: 16,
            prompt_steps: 500,
            prompt_warmup_steps: 50,
            prompt_lr: 3e-3,
            prompt_momentum: 0.9,
            prompt_eval_interval: 100,
            probe_batch_size: 16,
            probe_steps: 300,
            probe_lr: 1e-2,
            probe_weight_decay: 1e-3,
            ft_steps: 300,
            ft_lr: 1e-3,
        }
    }

    /// The published optimisation hyperparameters on a larger synthetic
    /// model. Not used by tests.
    pub fn paper_scale() -> Self {
        Self {
            preset: Preset::PaperScale,
            out_dir: "runs/paper-scale".into(),
            samples_per_class: 2000,
            image_size: 32,
            text_d_model: 128,
            text_heads: 8,
            text_layers: 4,
            max_seq_len: 64,
            vision_d_model: 128,
            vision_heads: 8,
            vision_layers: 4,
            d_joint: 128,
            batch_size: 72,
            steps: 40_000,
            warmup_steps: 4_000,
            peak_lr: 4e-5,
            weight_decay: 0.2,
            eval_interval: 1_000,
            context_length: DEFAULT_CONTEXT_LENGTH,
            prompt_batch_size: 36,
            prompt_steps: 4_000,
            prompt_warmup_steps: 1_000,
            prompt_lr: 1e-3,
            prompt_eval_interval: 500,
            probe_batch_size: 36,
            probe_steps: 8_000,
            probe_lr: 5e-4,
            probe_weight_decay: 1e-3,
            ft_steps: 8_000,
            ft_lr: 5e-4,
            ..Self::toy()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    /// Parses a config. Serde reports the offending line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Replaces the seed with `CLEFT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        self.synth_spec().validate()?;
        self.model_config(3 + self.n_classes)?.validate()?;
        FreezePolicy::by_name(&self.freeze_policy)?;
        self.pretrain_config().schedule.validate()?;
        self.prompt_tune_config().schedule.validate()?;
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("prompt_batch_size", self.prompt_batch_size),
            ("prompt_eval_interval", self.prompt_eval_interval),
            ("context_length", self.context_length),
            ("probe_batch_size", self.probe_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.n_classes,
            image_size: self.image_size,
            noise_std: self.noise_std,
            samples_per_class: self.samples_per_class,
            seed: self.seed,
            attributes: self.attributes,
            bare_caption_fraction: self.bare_caption_fraction,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        match self.adapter {
            AdapterKind::None => AdapterConfig::None,
            AdapterKind::Lora => AdapterConfig::Lora {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                targets: self.lora_targets.clone(),
            },
            AdapterKind::Ia3 => AdapterConfig::Ia3 {
                targets: self.ia3_targets.clone(),
                allow_query: self.ia3_allow_query,
            },
            AdapterKind::Prefix => AdapterConfig::Prefix {
                length: self.prefix_length,
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            text: TextEncoderConfig {
                vocab_size,
                d_model: self.text_d_model,
                n_heads: self.text_heads,
                n_layers: self.text_layers,
                max_seq_len: self.max_seq_len,
                eos_token_id: EOS,
                pad_token_id: PAD,
                unlock_positional: self.unlock_positional,
            },
            vision: VisionEncoderConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                channels: 1,
                d_model: self.vision_d_model,
                n_heads: self.vision_heads,
                n_layers: self.vision_layers,
                final_layer_norm: self.vision_final_layer_norm,
            },
            adapter: self.adapter_config(),
            d_joint: self.d_joint,
            tau_init: self.tau_init,
        })
    }

    pub fn freeze(&self) -> Result<FreezePolicy> {
        FreezePolicy::by_name(&self.freeze_policy)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            schedule: ScheduleConfig {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.steps,
                min_lr: self.min_lr,
            },
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            batch_size: self.batch_size,
            eval_interval: self.eval_interval,
            denominator: self.denominator,
            seed: self.seed,
            max_len: self.max_seq_len,
        }
    }

    pub fn prompt_tune_config(&self) -> PromptTuneConfig {
        PromptTuneConfig {
            context_length: self.context_length,
            schedule: ScheduleConfig {
                peak_lr: self.prompt_lr,
                warmup_steps: self.prompt_warmup_steps,
                total_steps: self.prompt_steps,
                min_lr: 0.0,
            },
            sgd: SgdConfig {
                momentum: self.prompt_momentum,
                weight_decay: 0.0,
            },
            batch_size: self.prompt_batch_size,
            eval_interval: self.prompt_eval_interval,
            seed: self.seed,
            unfreeze_tau: false,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            batch_size: self.probe_batch_size,
            steps: self.probe_steps,
            lr: self.probe_lr,
            weight_decay: self.probe_weight_decay,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            batch_size: self.probe_batch_size,
            steps: self.ft_steps,
            lr: self.ft_lr,
            weight_decay: self.probe_weight_decay,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::toy(), RunConfig::paper_scale()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        let p = RunConfig::paper_scale();
        assert_eq!((p.batch_size, p.steps, p.warmup_steps, p.peak_lr, p.weight_decay), (72, 40_000, 4_000, 4e-5, 0.2));
        assert_eq!((p.prompt_batch_size, p.prompt_steps, p.prompt_warmup_steps, p.prompt_lr), (36, 4_000, 1_000, 1e-3));
        assert_eq!(p.context_length, 30);
        let t = RunConfig::toy();
        assert_eq!((t.batch_size, t.steps, t.warmup_steps, t.eval_interval), (16, 2000, 100, 200));
    }

    #[test]
    fn config_is_flat() {
        let v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        for (k, field) in v.as_object().unwrap() {
            assert!(!field.is_object(), "{k} is nested");
        }
    }

    #[test]
    fn unknown_key_and_bad_type_report_location() {
        let mut text = RunConfig::toy().to_json();
        text = text.replacen("\"seed\": 0,", "\"seed\": 0,\n  \"sede\": 1,", 1);
        let e = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(e.contains("sede") && e.contains("line"), "{e}");
        let bad = RunConfig::toy().to_json().replacen("\"steps\": 2000", "\"steps\": \"many\"", 1);
        let e = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn missing_context_length_defaults_to_thirty() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("context_length");
        assert_eq!(RunConfig::from_json(&v.to_string()).unwrap().context_length, 30);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::toy();
        c.warmup_steps = c.steps;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.freeze_policy = "everything".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.stage = 3;
        assert!(c.validate().is_err());
    }
}
