//! Run configuration.
//!
//! A [`Config`] is a flat set of named fields. On disk it is a `key=value`
//! text file, one key per line, `#` starting a comment. Every field is a key
//! and unknown keys are rejected. Floats are written with Rust's shortest
//! round-trip formatting, so `parse(to_text(c)) == c` bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming a default config file for the CLI.
pub const CONFIG_ENV: &str = "PARTSEG_CONFIG";

/// The two published loss/matching weight assignments. They differ by a
/// swap of (alpha, lambda_cls) and (beta, lambda_reg); both are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightPreset {
    /// alpha=5, beta=20, lambda_cls=10, lambda_reg=1 (default).
    Primary,
    /// alpha=10, beta=1, lambda_cls=5, lambda_reg=20.
    Alternate,
}

impl WeightPreset {
    /// `(alpha, beta, lambda_cls, lambda_reg)`
    pub fn weights(self) -> (f64, f64, f64, f64) {
        match self {
            WeightPreset::Primary => (5.0, 20.0, 10.0, 1.0),
            WeightPreset::Alternate => (10.0, 1.0, 5.0, 20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub image_size: usize,
    pub encoder_stride: usize,
    pub embed_dim: usize,
    pub tokens_per_part: usize,
    pub num_queries: usize,
    pub num_categories: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub eos_weight: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub class_head_layers: usize,
    pub prompt_head_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub mask_threshold: f64,
    pub mask_sharpness: f64,
    pub point_extent: f64,
    pub seed: u64,
}

impl Default for Config {
    /// Full-scale settings: 1024 px images, 256-wide tokens, 25 queries.
    fn default() -> Self {
        let (alpha, beta, lambda_cls, lambda_reg) = WeightPreset::Primary.weights();
        Config {
            image_size: 1024,
            encoder_stride: 16,
            embed_dim: 256,
            tokens_per_part: 1,
            num_queries: 25,
            num_categories: 40,
            alpha,
            beta,
            lambda_cls,
            lambda_reg,
            eos_weight: 1.0,
            encoder_layers: 6,
            decoder_layers: 6,
            num_heads: 8,
            ffn_mult: 4,
            class_head_layers: 3,
            prompt_head_layers: 3,
            dropout: 0.0,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 150,
            checkpoint_every: 10,
            mask_threshold: 0.5,
            mask_sharpness: 50.0,
            point_extent: 0.2,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($mac:ident) => {
        $mac! {
            image_size: usize,
            encoder_stride: usize,
            embed_dim: usize,
            tokens_per_part: usize,
            num_queries: usize,
            num_categories: usize,
            alpha: f64,
            beta: f64,
            lambda_cls: f64,
            lambda_reg: f64,
            eos_weight: f64,
            encoder_layers: usize,
            decoder_layers: usize,
            num_heads: usize,
            ffn_mult: usize,
            class_head_layers: usize,
            prompt_head_layers: usize,
            dropout: f64,
            lr: f64,
            adam_beta1: f64,
            adam_beta2: f64,
            adam_eps: f64,
            batch_size: usize,
            epochs: usize,
            checkpoint_every: usize,
            mask_threshold: f64,
            mask_sharpness: f64,
            point_extent: f64,
            seed: u64,
        }
    };
}

macro_rules! impl_text {
    ($($field:ident: $ty:ty),* $(,)?) => {
        impl Config {
            /// Field names in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Serializes to the `key=value` file format.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{}={}", stringify!($field), self.$field);)*
                out
            }

            fn set_field(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| Error::ConfigParse {
                            line,
                            message: format!("bad value {value:?} for {key}: {e}"),
                        })?;
                    })*
                    _ => {
                        return Err(Error::ConfigParse {
                            line,
                            message: format!("unknown key {key:?}"),
                        })
                    }
                }
                Ok(())
            }
        }
    };
}

config_keys!(impl_text);

impl Config {
    /// Desk-scale settings: 128 px images, 32-wide tokens, 3 categories.
    pub fn desk() -> Self {
        Config {
            image_size: 128,
            embed_dim: 32,
            num_queries: 8,
            num_categories: 3,
            epochs: 30,
            ..Config::default()
        }
    }

    pub fn with_weights(mut self, preset: WeightPreset) -> Self {
        let (alpha, beta, lambda_cls, lambda_reg) = preset.weights();
        self.alpha = alpha;
        self.beta = beta;
        self.lambda_cls = lambda_cls;
        self.lambda_reg = lambda_reg;
        self
    }

    /// Width of one part's prompt group, `K * d`.
    pub fn token_width(&self) -> usize {
        self.tokens_per_part * self.embed_dim
    }

    /// Side of the encoder feature map.
    pub fn feature_side(&self) -> usize {
        self.image_size / self.encoder_stride
    }

    /// Index of the no-part class.
    pub fn no_part(&self) -> usize {
        self.num_categories
    }

    /// Parses the `key=value` format, starting from [`Config::default`] for
    /// any key the text leaves out. The result is not validated.
    pub fn parse(text: &str) -> Result<Config> {
        Config::parse_over(Config::default(), text)
    }

    /// Like [`Config::parse`] but fills missing keys from `base`.
    pub fn parse_over(base: Config, text: &str) -> Result<Config> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected key=value, got {content:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
            cfg.set_field(key, value.trim(), line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every constraint, naming the first one violated.
    pub fn validate(self) -> Result<Config> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("image_size", self.image_size),
            ("encoder_stride", self.encoder_stride),
            ("embed_dim", self.embed_dim),
            ("num_queries", self.num_queries),
            ("num_categories", self.num_categories),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("num_heads", self.num_heads),
            ("ffn_mult", self.ffn_mult),
            ("class_head_layers", self.class_head_layers),
            ("prompt_head_layers", self.prompt_head_layers),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("eos_weight", self.eos_weight),
            ("lr", self.lr),
        ];
        for (name, value) in nonneg {
            if !value.is_finite() || value < 0.0 {
                return fail(format!("{name} must be finite and >= 0, got {value}"));
            }
        }
        if !(1..=2).contains(&self.tokens_per_part) {
            return fail(format!(
                "tokens_per_part must be 1 or 2, got {}",
                self.tokens_per_part
            ));
        }
        if self.image_size % self.encoder_stride != 0 {
            return fail("image_size must be a multiple of encoder_stride".into());
        }
        if self.feature_side() % 4 != 0 {
            return fail(format!(
                "feature map side {} must be divisible by 4",
                self.feature_side()
            ));
        }
        if self.embed_dim % 4 != 0 || self.embed_dim < 8 {
            return fail("embed_dim must be a multiple of 4 and at least 8".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail("embed_dim must be divisible by num_heads".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        for (name, value) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&value) {
                return fail(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return fail("mask_threshold must lie in (0, 1)".into());
        }
        if !(self.mask_sharpness > 0.0) || !self.mask_sharpness.is_finite() {
            return fail("mask_sharpness must be positive".into());
        }
        if !(self.point_extent > 0.0 && self.point_extent < 1.0) {
            return fail("point_extent must lie in (0, 1)".into());
        }
        if self.num_categories > u16::MAX as usize - 1 {
            return fail("num_categories too large".into());
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = Config::default().validate().unwrap();
        assert_eq!(cfg.num_queries, 25);
        assert_eq!(cfg.embed_dim, 256);
        assert_eq!(cfg.feature_side(), 64);
        assert_eq!(cfg.token_width(), 256);
        Config::desk().validate().unwrap();
    }

    #[test]
    fn zero_queries_rejected() {
        let cfg = Config {
            num_queries: 0,
            ..Config::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("num_queries")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        let cfg = Config {
            alpha: -1.0,
            ..Config::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("alpha")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Config::parse("image_size=64\nbogus=1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# header\n\nseed=9 # trailing\nalpha = 2.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 2.5);
    }

    #[test]
    fn presets_are_swapped_pairs() {
        let p = Config::default().with_weights(WeightPreset::Primary);
        let a = Config::default().with_weights(WeightPreset::Alternate);
        assert_eq!((p.alpha, p.lambda_cls), (a.lambda_cls, a.alpha));
        assert_eq!((p.beta, p.lambda_reg), (a.lambda_reg, a.beta));
    }

    #[test]
    fn every_key_is_written() {
        let text = Config::default().to_text();
        assert_eq!(text.lines().count(), Config::KEYS.len());
    }

    proptest::proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(
            alpha in proptest::num::f64::NORMAL | proptest::num::f64::ZERO,
            lr in 0.0f64..1.0,
            eos in 0.0f64..10.0,
            seed in proptest::num::u64::ANY,
            queries in 1usize..200,
        ) {
            let cfg = Config { alpha, lr, eos_weight: eos, seed, num_queries: queries, ..Config::desk() };
            let back = Config::parse(&cfg.to_text()).unwrap();
            proptest::prop_assert_eq!(back.alpha.to_bits(), cfg.alpha.to_bits());
            proptest::prop_assert_eq!(back.lr.to_bits(), cfg.lr.to_bits());
            proptest::prop_assert_eq!(&back, &cfg);
            proptest::prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
