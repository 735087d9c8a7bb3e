//! Run configuration as flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. `env` selects the
//! defaults; every other key overrides one of them. Keys:
//!
//! | key | meaning | shapes | balls |
//! |-----|---------|--------|-------|
//! | `env` | `shapes` or `balls` | | |
//! | `slots` | slots `N` | 5 | 3 |
//! | `mechanisms` | mechanisms `M` | 5 | 7 |
//! | `slot_dim` | slot width `d_s` | 4 | 4 |
//! | `cci_dim` | CCI width | 32 | 32 |
//! | `hidden` | hidden width of selector, mechanisms, CCI projection and encoder MLP | 512 | 512 |
//! | `encoder_hidden` | encoder MLP width alone; must come after `hidden` | 512 | 512 |
//! | `cnn_channels` | channels of the first convolution | 32 | 32 |
//! | `variant` | `full`, `ab01`, `ab10`, `ab00`, `parallel`, `mlp_cci`, `random_mech` | full | full |
//! | `heads` | attention heads | 2 | 2 |
//! | `temperature` | Gumbel temperature | 1 | 1 |
//! | `lr` | Adam learning rate | 0.0005 | 0.0005 |
//! | `batch_size` | world-model batch | 1024 | 1024 |
//! | `epochs` | world-model epochs | 100 | 100 |
//! | `gamma` | hinge margin | 1 | 1 |
//! | `decoder_hidden` | decoder hidden width | 2048 | 2048 |
//! | `decoder_epochs` | decoder epochs | 100 | 100 |
//! | `decoder_batch_size` | decoder batch | 1024 | 1024 |
//! | `decoder_microbatch` | rows per decoder pass | 256 | 256 |
//! | `seed` | master seed | 0 | 0 |
//! | `train_data`, `eval_data` | dataset paths | unset | unset |
//! | `out_dir` | output directory | unset | unset |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::{DecoderTrainConfig, LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub decoder_hidden: usize,
    pub decoder_epochs: usize,
    pub decoder_batch_size: usize,
    pub decoder_microbatch: usize,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let train = TrainConfig::new(ModelConfig::for_env(env), 0);
        let dec = DecoderTrainConfig::new(0);
        Self {
            model: train.model,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            gamma: train.loss.gamma,
            decoder_hidden: dec.hidden,
            decoder_epochs: dec.epochs,
            decoder_batch_size: dec.batch_size,
            decoder_microbatch: dec.microbatch,
            seed: 0,
            train_data: None,
            eval_data: None,
            out_dir: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            loss: LossConfig { gamma: self.gamma },
            seed: self.seed,
        }
    }

    pub fn decoder_config(&self) -> DecoderTrainConfig {
        DecoderTrainConfig {
            hidden: self.decoder_hidden,
            epochs: self.decoder_epochs,
            batch_size: self.decoder_batch_size,
            lr: self.lr,
            seed: self.seed,
            microbatch: self.decoder_microbatch,
        }
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
        }
        let t = &mut self.model.transition;
        match key {
            "env" => {
                let env: EnvKind = value.parse()?;
                if env != self.model.env {
                    return Err(Error::InvalidArgument("env must be the first key".into()));
                }
            }
            "slots" => t.slots = num(key, value)?,
            "mechanisms" => t.mechanisms = num(key, value)?,
            "slot_dim" => t.slot_dim = num(key, value)?,
            "cci_dim" => t.cci_dim = num(key, value)?,
            "hidden" => {
                t.hidden = num(key, value)?;
                self.model.encoder_hidden = t.hidden;
            }
            "variant" => t.variant = value.parse::<Variant>()?,
            "heads" => t.heads = num(key, value)?,
            "temperature" => t.temperature = num(key, value)?,
            "encoder_hidden" => self.model.encoder_hidden = num(key, value)?,
            "cnn_channels" => self.model.cnn_channels = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "decoder_hidden" => self.decoder_hidden = num(key, value)?,
            "decoder_epochs" => self.decoder_epochs = num(key, value)?,
            "decoder_batch_size" => self.decoder_batch_size = num(key, value)?,
            "decoder_microbatch" => self.decoder_microbatch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_data" => self.train_data = Some(value.into()),
            "eval_data" => self.eval_data = Some(value.into()),
            "out_dir" => self.out_dir = Some(value.into()),
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let env = pairs
            .iter()
            .find(|(k, _)| k == "env")
            .map(|(_, v)| v.parse::<EnvKind>())
            .transpose()?
            .ok_or_else(|| Error::InvalidArgument("config must set env".into()))?;
        let mut cfg = Self::for_env(env);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let t = &self.model.transition;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("env", self.model.env.to_string());
        kv("slots", t.slots.to_string());
        kv("mechanisms", t.mechanisms.to_string());
        kv("slot_dim", t.slot_dim.to_string());
        kv("cci_dim", t.cci_dim.to_string());
        kv("hidden", t.hidden.to_string());
        kv("encoder_hidden", self.model.encoder_hidden.to_string());
        kv("cnn_channels", self.model.cnn_channels.to_string());
        kv("variant", t.variant.to_string());
        kv("heads", t.heads.to_string());
        kv("temperature", t.temperature.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("gamma", self.gamma.to_string());
        kv("decoder_hidden", self.decoder_hidden.to_string());
        kv("decoder_epochs", self.decoder_epochs.to_string());
        kv("decoder_batch_size", self.decoder_batch_size.to_string());
        kv("decoder_microbatch", self.decoder_microbatch.to_string());
        kv("seed", self.seed.to_string());
        for (k, p) in [
            ("train_data", &self.train_data),
            ("eval_data", &self.eval_data),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("lr and gamma must be positive".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 2 and epochs positive".into()));
        }
        if self.decoder_hidden == 0 || self.decoder_batch_size == 0 || self.decoder_microbatch == 0 {
            return Err(Error::InvalidArgument("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}
