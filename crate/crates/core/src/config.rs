//! Run configuration: `key = value` files, `--set` overrides and the key
//! registry that backs `--help`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datamodel::SyntheticConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, ModelConfig};
use crate::numerics::AdamConfig;
use crate::runtime::{MaskSettings, Phase, TrainRunSpec};

/// Optimizer and loop settings of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub lr_initial: f64,
    pub lr_end: f64,
    pub decay_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainSettings {
    fn with_steps(steps: usize) -> Self {
        let adam = AdamConfig::default();
        Self {
            steps,
            batch: 64,
            eval_every: 200,
            lr_initial: adam.lr_initial,
            lr_end: adam.lr_end,
            decay_power: adam.decay_power,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }

    fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr_initial: self.lr_initial,
            lr_end: self.lr_end,
            total_steps: self.steps,
            decay_power: self.decay_power,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeSettings {
    /// Candidates per request.
    pub batch: usize,
    pub requests: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: SyntheticConfig,
    /// Dataset file to train on; empty means generate from `data.*`.
    pub data_path: String,
    /// `max_seq_len` is taken from `data.max_seq_len`.
    pub encoder: EncoderConfig,
    pub finetune: FinetuneConfig,
    /// Pre-trained checkpoint for fine-tuning; empty means none.
    pub init_checkpoint: String,
    pub masks: MaskSettings,
    pub pretrain: TrainSettings,
    pub finetune_train: TrainSettings,
    pub val_fraction: f64,
    pub serve: ServeSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            data: SyntheticConfig::default(),
            data_path: String::new(),
            encoder: EncoderConfig::default(),
            finetune: FinetuneConfig::default(),
            init_checkpoint: String::new(),
            masks: MaskSettings::default(),
            pretrain: TrainSettings::with_steps(5000),
            finetune_train: TrainSettings::with_steps(2000),
            val_fraction: 0.1,
            serve: ServeSettings {
                batch: 100,
                requests: 10,
            },
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str) -> std::result::Result<(), String>,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

macro_rules! registry {
    ($($name:literal => $($field:ident).+, $help:literal;)*) => {
        pub const KEYS: &[Key] = &[$(Key {
            name: $name,
            help: $help,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse(v)?;
                Ok(())
            },
        }),*];
    };
}

registry! {
    "seed" => seed, "run seed";
    "data.path" => data_path, "dataset file; empty generates synthetic data";
    "data.num_users" => data.num_users, "synthetic users";
    "data.num_items" => data.num_items, "item vocabulary";
    "data.num_categories" => data.num_categories, "item categories";
    "data.price_buckets" => data.price_buckets, "price buckets";
    "data.max_seq_len" => data.max_seq_len, "maximum history length L";
    "data.min_seq_len" => data.min_seq_len, "minimum history length";
    "data.latent_dim" => data.latent_dim, "latent preference dimension";
    "data.prototypes_per_user" => data.prototypes_per_user, "interest prototypes per user";
    "data.zipf_exponent" => data.zipf_exponent, "item popularity exponent";
    "data.preference_sharpness" => data.preference_sharpness, "inverse temperature of item choice";
    "data.repeat_prob" => data.repeat_prob, "probability of repeating a recent item";
    "data.explore_prob" => data.explore_prob, "probability of a popularity-driven pick";
    "data.candidates_per_user" => data.candidates_per_user, "labelled candidates per user";
    "data.positive_rate" => data.positive_rate, "target share of positive labels";
    "data.label_noise" => data.label_noise, "logistic label noise scale";
    "data.rating_levels" => data.rating_levels, "rating behavior levels";
    "data.click_buckets" => data.click_buckets, "click count buckets";
    "data.genders" => data.genders, "gender context values";
    "data.age_buckets" => data.age_buckets, "age context buckets";
    "data.hours" => data.hours, "hour context values";
    "model.num_layers" => encoder.num_layers, "encoder layers";
    "model.d_model" => encoder.d_model, "hidden width";
    "model.num_heads" => encoder.num_heads, "attention heads";
    "model.ffn_multiplier" => encoder.ffn_multiplier, "feed-forward width over d_model";
    "model.use_uni_attn" => finetune.use_uni_attn, "enable uni cross-attention";
    "model.use_qformer" => finetune.use_qformer, "enable the querying transformer";
    "model.tie_uni_attn" => finetune.tie_uni_attn, "share query/output projections with the encoder";
    "model.num_queries" => finetune.num_queries, "learnable queries K (< L)";
    "model.context_queries" => finetune.context_queries, "offset queries by context features";
    "model.head_hidden" => finetune.head_hidden, "prediction head hidden width";
    "model.baseline_mp" => finetune.baseline_mp, "frozen encoder + adapter baseline";
    "finetune.from_scratch" => finetune.from_scratch, "ignore the pre-trained checkpoint";
    "finetune.freeze_encoder" => finetune.freeze_encoder, "keep encoder parameters fixed";
    "finetune.init_checkpoint" => init_checkpoint, "pre-trained checkpoint path";
    "mask.item_ratio" => masks.item_ratio, "share of positions with the item mask";
    "mask.behavior_ratio" => masks.behavior_ratio, "share of positions with the behavior mask";
    "mask.behavior_weight" => masks.behavior_weight, "weight of the behavior loss";
    "pretrain.steps" => pretrain.steps, "pre-training steps";
    "pretrain.batch" => pretrain.batch, "sequences per step";
    "pretrain.eval_every" => pretrain.eval_every, "steps between evaluations";
    "pretrain.lr_initial" => pretrain.lr_initial, "initial learning rate";
    "pretrain.lr_end" => pretrain.lr_end, "final learning rate";
    "pretrain.decay_power" => pretrain.decay_power, "polynomial decay power";
    "pretrain.beta1" => pretrain.beta1, "Adam beta1";
    "pretrain.beta2" => pretrain.beta2, "Adam beta2";
    "pretrain.epsilon" => pretrain.epsilon, "Adam epsilon";
    "finetune.steps" => finetune_train.steps, "fine-tuning steps";
    "finetune.batch" => finetune_train.batch, "users per step";
    "finetune.eval_every" => finetune_train.eval_every, "steps between validation AUC checks";
    "finetune.lr_initial" => finetune_train.lr_initial, "initial learning rate";
    "finetune.lr_end" => finetune_train.lr_end, "final learning rate";
    "finetune.decay_power" => finetune_train.decay_power, "polynomial decay power";
    "finetune.beta1" => finetune_train.beta1, "Adam beta1";
    "finetune.beta2" => finetune_train.beta2, "Adam beta2";
    "finetune.epsilon" => finetune_train.epsilon, "Adam epsilon";
    "finetune.val_fraction" => val_fraction, "share of users held out";
    "serve.batch" => serve.batch, "candidates per request";
    "serve.requests" => serve.requests, "simulated requests";
}

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// `key  default  help` lines for every key.
pub fn key_help() -> String {
    let defaults = Config::default();
    let mut out = String::from("Config keys (default in brackets):\n");
    for k in KEYS {
        writeln!(out, "  {:<28} [{}] {}", k.name, (k.get)(&defaults), k.help).unwrap();
    }
    out
}

impl Config {
    pub fn get(&self, key: &str) -> Result<String> {
        find_key(key)
            .map(|k| (k.get)(self))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = find_key(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        (k.set)(self, value.trim()).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Applies the assignments of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let k = find_key(key).ok_or_else(|| parse_err(format!("unknown key `{key}`")))?;
            (k.set)(self, value.trim()).map_err(|e| parse_err(format!("bad value for `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, parseable by [`Config::from_text`].
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, (k.get)(self)))
            .collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                max_seq_len: self.data.max_seq_len,
                ..self.encoder.clone()
            },
            finetune: self.finetune.clone(),
            schema: self.data.schema(),
        }
    }

    pub fn run_spec(&self, phase: Phase) -> TrainRunSpec {
        let train = match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Finetune => &self.finetune_train,
        };
        TrainRunSpec {
            phase,
            steps: train.steps,
            batch: train.batch,
            optimizer: train.optimizer(),
            eval_every: train.eval_every,
            seed: self.seed,
            run_dir: None,
            init_checkpoint: (!self.init_checkpoint.is_empty()).then(|| PathBuf::from(&self.init_checkpoint)),
            model: self.model(),
            masks: self.masks.clone(),
            val_fraction: self.val_fraction,
        }
    }
}
