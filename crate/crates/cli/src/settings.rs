//! Run settings: a preset, then a key=value file, then flags, later sources winning.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use chunkstack::aggregator::{AggregatorKind, ChunkTransformerConfig};
use chunkstack::chunker::ChunkConfig;
use chunkstack::model::{ModelConfig, WordPool, DEFAULT_INIT_STD};
use chunkstack::tensor::DType;
use chunkstack::train::{Mode, TrainConfig};
use chunkstack::word_encoder::WordEncoderConfig;

/// Recognised keys, in echo order.
pub const KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "grad_accum_steps",
    "epochs",
    "warmup_steps",
    "mode",
    "seed",
    "dtype",
    "word_pool",
    "aggregator",
    "dropout",
    "linear_decay",
    "content_len",
    "max_chunks",
    "n_class",
    "model",
    "hidden",
    "layers",
    "heads",
    "ff_inner",
    "init_std",
    "chunk_layers",
    "chunk_heads",
    "chunk_key_dim",
    "chunk_ff_inner",
    "downsample",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key}={v}: {e}"))
}

impl Settings {
    pub fn preset(name: &str) -> Result<Self> {
        let base = match name {
            "finetune" => TrainConfig::finetune(),
            "frozen" => TrainConfig::frozen(),
            other => bail!("unknown preset {other:?} (expected finetune or frozen)"),
        };
        let mut s = Settings {
            values: BTreeMap::new(),
        };
        for (k, v) in [
            ("lr", format!("{:e}", base.lr)),
            ("batch_size", base.batch_size.to_string()),
            ("grad_accum_steps", base.grad_accum_steps.to_string()),
            ("epochs", base.epochs.to_string()),
            ("warmup_steps", base.warmup_steps.to_string()),
            ("mode", base.mode.name().to_string()),
            ("seed", base.seed.to_string()),
            ("dtype", base.dtype.to_string()),
            ("word_pool", base.word_pool.name().to_string()),
            ("aggregator", base.aggregator.name().to_string()),
            ("dropout", base.dropout.to_string()),
            ("linear_decay", base.linear_decay.to_string()),
            ("content_len", "202".into()),
            ("max_chunks", "32".into()),
            ("n_class", "2".into()),
            ("model", "desk".into()),
            ("init_std", DEFAULT_INIT_STD.to_string()),
            ("downsample", "false".into()),
        ] {
            s.set(k, &v)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            bail!("unknown setting {key:?}");
        }
        let value = value.trim();
        // Validate eagerly so a bad value is reported at its source.
        match key {
            "lr" | "dropout" | "init_std" => drop(num::<f64>(key, value)?),
            "seed" => drop(num::<u64>(key, value)?),
            "linear_decay" | "downsample" => drop(num::<bool>(key, value)?),
            "mode" => drop(value.parse::<Mode>()?),
            "dtype" => drop(value.parse::<DType>()?),
            "word_pool" => drop(value.parse::<WordPool>()?),
            "aggregator" => drop(value.parse::<AggregatorKind>()?),
            "model" => {
                if value != "desk" && value != "full" {
                    bail!("model={value}: expected desk or full");
                }
            }
            _ => drop(num::<usize>(key, value)?),
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, contents: &str, path: &str) -> Result<()> {
        for (i, raw) in contents.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{path}:{}: expected key=value", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{path}:{}", i + 1))?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| anyhow!("missing setting {key}"))?;
        num(key, v)
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key).map(|v| num(key, v)).transpose()
    }

    pub fn downsample(&self) -> Result<bool> {
        self.parsed("downsample")
    }

    pub fn n_class(&self) -> Result<usize> {
        self.parsed("n_class")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.parsed("lr")?,
            batch_size: self.parsed("batch_size")?,
            grad_accum_steps: self.parsed("grad_accum_steps")?,
            epochs: self.parsed("epochs")?,
            warmup_steps: self.parsed("warmup_steps")?,
            mode: self.get("mode").unwrap_or("finetune").parse()?,
            seed: self.parsed("seed")?,
            dtype: self.get("dtype").unwrap_or("f32").parse()?,
            word_pool: self.get("word_pool").unwrap_or("cls").parse()?,
            aggregator: self.get("aggregator").unwrap_or("transformer").parse()?,
            dropout: self.parsed("dropout")?,
            linear_decay: self.parsed("linear_decay")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn chunking(&self) -> Result<ChunkConfig> {
        let c = ChunkConfig::new(self.parsed("content_len")?, self.parsed("max_chunks")?);
        c.validate()?;
        Ok(c)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let chunking = self.chunking()?;
        let mut word = match self.get("model").unwrap_or("desk") {
            "full" => WordEncoderConfig::full(vocab_size, chunking.row_len()),
            _ => WordEncoderConfig::desk(vocab_size, chunking.row_len()),
        };
        if let Some(h) = self.optional("hidden")? {
            word.hidden = h;
        }
        if let Some(l) = self.optional("layers")? {
            word.n_layers = l;
        }
        if let Some(n) = self.optional("heads")? {
            word.n_heads = n;
        }
        if let Some(f) = self.optional("ff_inner")? {
            word.ff_inner = f;
        }
        if word.n_heads == 0 || word.hidden % word.n_heads != 0 {
            bail!("hidden {} is not divisible by heads {}", word.hidden, word.n_heads);
        }
        word.head_dim = word.hidden / word.n_heads;
        let mut chunk_tf = ChunkTransformerConfig::scaled(word.hidden);
        if let Some(l) = self.optional("chunk_layers")? {
            chunk_tf.n_layers = l;
        }
        if let Some(n) = self.optional("chunk_heads")? {
            chunk_tf.n_heads = n;
            chunk_tf.key_dim = word.hidden / n.max(1);
        }
        if let Some(k) = self.optional("chunk_key_dim")? {
            chunk_tf.key_dim = k;
        }
        if let Some(f) = self.optional("chunk_ff_inner")? {
            chunk_tf.ff_inner = f;
        }
        let train = self.train_config()?;
        let cfg = ModelConfig {
            n_class: self.n_class()?,
            word,
            word_pool: train.word_pool,
            aggregator: train.aggregator,
            chunk_transformer: chunk_tf,
            chunking,
            init_std: self.parsed("init_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key=value` pairs in a fixed order, space separated.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k}={v}")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
