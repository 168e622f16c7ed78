//! Flat `key=value` configuration covering encoder, decoder and training
//! hyperparameters. Blank lines and `#` comments are ignored; unknown or
//! repeated keys are errors.

use std::collections::HashSet;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const ENCODER_KEYS: &[&str] = &[
    "growth_rate",
    "block_depth",
    "initial_channels",
    "num_blocks",
    "compression",
    "input_channels",
    "stem_kernel",
    "stem_stride",
];

pub const DECODER_KEYS: &[&str] = &["hidden_size", "embed_size", "attention_size", "max_decode_len"];

pub const TRAIN_KEYS: &[&str] = &[
    "rho",
    "epsilon",
    "batch_size",
    "clip_norm",
    "patience_epochs",
    "max_epochs",
    "seed",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Sets one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        let t = &mut self.train;
        match key {
            "growth_rate" => e.growth_rate = num(key, value)?,
            "block_depth" => e.block_depth = num(key, value)?,
            "initial_channels" => e.initial_channels = num(key, value)?,
            "num_blocks" => e.num_blocks = num(key, value)?,
            "compression" => e.compression = num(key, value)?,
            "input_channels" => e.input_channels = num(key, value)?,
            "stem_kernel" => e.stem_kernel = num(key, value)?,
            "stem_stride" => e.stem_stride = num(key, value)?,
            "hidden_size" => d.hidden_size = num(key, value)?,
            "embed_size" => d.embed_size = num(key, value)?,
            "attention_size" => d.attention_size = num(key, value)?,
            "max_decode_len" => d.max_decode_len = num(key, value)?,
            "rho" => t.rho = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "patience_epochs" => t.patience_epochs = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.train.validate()
    }

    /// Canonical text; every key in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "{}{}{}",
            encoder_text(&self.model.encoder),
            decoder_text(&self.model.decoder),
            train_text(&self.train)
        )
    }
}

pub fn encoder_text(e: &EncoderConfig) -> String {
    format!(
        "growth_rate={}\nblock_depth={}\ninitial_channels={}\nnum_blocks={}\ncompression={}\ninput_channels={}\nstem_kernel={}\nstem_stride={}\n",
        e.growth_rate, e.block_depth, e.initial_channels, e.num_blocks, e.compression,
        e.input_channels, e.stem_kernel, e.stem_stride
    )
}

pub fn decoder_text(d: &DecoderConfig) -> String {
    format!(
        "hidden_size={}\nembed_size={}\nattention_size={}\nmax_decode_len={}\n",
        d.hidden_size, d.embed_size, d.attention_size, d.max_decode_len
    )
}

pub fn train_text(t: &TrainConfig) -> String {
    format!(
        "rho={}\nepsilon={}\nbatch_size={}\nclip_norm={}\npatience_epochs={}\nmax_epochs={}\nseed={}\n",
        t.rho, t.epsilon, t.batch_size, t.clip_norm, t.patience_epochs, t.max_epochs, t.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("growth_rate", "8").unwrap();
        cfg.set("epsilon", "1e-8").unwrap();
        cfg.set("compression", "0.5").unwrap();
        let text = cfg.to_text();
        for k in ENCODER_KEYS.iter().chain(DECODER_KEYS).chain(TRAIN_KEYS) {
            assert!(text.contains(&format!("{k}=")), "{k} missing");
        }
        assert_eq!(RunConfig::parse(&text, Path::new("c")).unwrap(), cfg);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::parse("# desk run\n growth_rate = 8 \n\nhidden_size=128 # small\n", Path::new("c"))
            .unwrap();
        assert_eq!(cfg.model.encoder.growth_rate, 8);
        assert_eq!(cfg.model.decoder.hidden_size, 128);
    }

    #[test]
    fn unknown_duplicate_and_invalid_keys_fail() {
        let err = RunConfig::parse("growth_rate=8\nlearning_rate=1\n", Path::new("c")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(RunConfig::parse("seed=1\nseed=2\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("batch_size=eight\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("rho=1.5\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("just a line\n", Path::new("c")).is_err());
    }
}
