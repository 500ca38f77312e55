//! Training configuration and its `key=value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::embedding::EmbeddingConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::heads::{HeadConfig, SilhouetteConfig};
use crate::objective::LossWeights;

use super::synth::SynthConfig;

/// Which optional modules take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub depth_stream: bool,
    pub distribution: bool,
    pub silhouette: bool,
    pub masking: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        depth_stream: true,
        distribution: true,
        silhouette: true,
        masking: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Total optimizer steps; 0 derives it from `epochs`.
    pub steps: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub mask_ratio: f64,
    pub dropout: f64,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub v_coarse: usize,
    pub v_full: usize,
    pub joints: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub decoder_c1: usize,
    pub decoder_c2: usize,
}

pub const FULL_SCALE_BATCH_SIZE: usize = 48;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 50,
            steps: 0,
            seed: 0,
            data_seed: 0,
            train_scenes: 64,
            weights: LossWeights::default(),
            toggles: Toggles::ALL_ON,
            mask_ratio: 0.15,
            dropout: 0.1,
            height: 32,
            width: 32,
            patch: 4,
            d_model: 32,
            heads: 4,
            blocks: 1,
            mlp_hidden: 128,
            head_hidden: 128,
            v_coarse: 20,
            v_full: 100,
            joints: 4,
            flow_layers: 6,
            flow_hidden: 64,
            decoder_c1: 16,
            decoder_c2: 8,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every accepted key, in serialization order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value::<_>(key, value, Kind::$kind)?,)*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `key=value` lines for every field.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{}={}", $key, self.$($field).+);)*
                out
            }
        }
    };
}

config_keys! {
    "learning_rate" => learning_rate: Float,
    "beta1" => beta1: Float,
    "beta2" => beta2: Float,
    "adam_eps" => adam_eps: Float,
    "batch_size" => batch_size: Int,
    "epochs" => epochs: Int,
    "steps" => steps: Int,
    "seed" => seed: Int,
    "data_seed" => data_seed: Int,
    "train_scenes" => train_scenes: Int,
    "lambda_d" => weights.distribution: Float,
    "lambda_v" => weights.vertices: Float,
    "lambda_3d" => weights.joints_3d: Float,
    "lambda_2d" => weights.joints_2d: Float,
    "lambda_s" => weights.silhouette: Float,
    "depth_stream" => toggles.depth_stream: Bool,
    "distribution" => toggles.distribution: Bool,
    "silhouette" => toggles.silhouette: Bool,
    "masking" => toggles.masking: Bool,
    "mask_ratio" => mask_ratio: Float,
    "dropout" => dropout: Float,
    "height" => height: Int,
    "width" => width: Int,
    "patch" => patch: Int,
    "d_model" => d_model: Int,
    "heads" => heads: Int,
    "blocks" => blocks: Int,
    "mlp_hidden" => mlp_hidden: Int,
    "head_hidden" => head_hidden: Int,
    "v_coarse" => v_coarse: Int,
    "v_full" => v_full: Int,
    "joints" => joints: Int,
    "flow_layers" => flow_layers: Int,
    "flow_hidden" => flow_hidden: Int,
    "decoder_c1" => decoder_c1: Int,
    "decoder_c2" => decoder_c2: Int,
}

#[derive(Clone, Copy)]
enum Kind {
    Float,
    Int,
    Bool,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, kind: Kind) -> Result<T> {
    let expected = match kind {
        Kind::Float => "a number",
        Kind::Int => "a non-negative integer",
        Kind::Bool => "true or false",
    };
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects {expected}, got `{value}`")))
}

impl TrainConfig {
    /// Defaults overridden by `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Small dimensions with every module on, for gradient checks and quick
    /// smoke runs.
    pub fn reduced() -> Self {
        TrainConfig {
            batch_size: 2,
            steps: 3,
            train_scenes: 4,
            height: 16,
            width: 16,
            d_model: 8,
            heads: 2,
            mlp_hidden: 16,
            head_hidden: 16,
            v_coarse: 8,
            v_full: 12,
            flow_layers: 2,
            flow_hidden: 8,
            decoder_c1: 4,
            decoder_c2: 2,
            ..TrainConfig::default()
        }
    }

    /// Desk defaults with the full-scale batch size.
    pub fn full_scale_batch() -> Self {
        TrainConfig {
            batch_size: FULL_SCALE_BATCH_SIZE,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if self.batch_size == 0 || self.train_scenes == 0 {
            return Err(Error::Config("batch_size and train_scenes must be ≥ 1".into()));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        self.weights.validate()?;
        self.embedding().validate()?;
        self.encoder().validate()?;
        self.heads().validate()?;
        self.flow().validate()?;
        self.synth().validate()?;
        if self.toggles.silhouette {
            self.silhouette().validate()?;
        }
        Ok(())
    }

    /// Optimizer steps per epoch, `⌈scenes / batch⌉`.
    pub fn steps_per_epoch(&self) -> usize {
        self.train_scenes.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.steps_per_epoch()
        }
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            height: self.height,
            width: self.width,
            patch: self.patch,
            image_channels: 1,
            d_model: self.d_model,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            blocks: self.blocks,
            depth_stream: self.toggles.depth_stream,
            ..EncoderConfig::desk(self.d_model)
        }
    }

    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            d_model: self.d_model,
            hidden: self.head_hidden,
            v_coarse: self.v_coarse,
            v_full: self.v_full,
            output_init_std: 0.0,
        }
    }

    pub fn silhouette(&self) -> SilhouetteConfig {
        SilhouetteConfig {
            channels: [self.decoder_c1, self.decoder_c2],
            dropout: self.dropout,
            ..SilhouetteConfig::desk(self.height, self.width, self.patch, self.d_model)
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            layers: self.flow_layers,
            hidden: self.flow_hidden,
            ..FlowConfig::desk(3 * self.v_coarse)
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            v_coarse: self.v_coarse,
            v_full: self.v_full,
            joints: self.joints,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 3e-4;
        cfg.toggles.masking = false;
        cfg.weights.silhouette = 0.25;
        cfg.steps = 17;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_whitespace() {
        let cfg = TrainConfig::parse("# header\n\n  beta2 = 0.95  # trailing\nmasking=false\n").unwrap();
        assert_eq!(cfg.beta2, 0.95);
        assert!(!cfg.toggles.masking);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in ["gamma=1", "beta1=1.0", "learning_rate=0", "batch_size=-3", "masking=yes", "novalue", "patch=5"] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn full_scale_settings() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.learning_rate, cfg.beta1, cfg.beta2), (1e-4, 0.9, 0.99));
        assert_eq!(TrainConfig::full_scale_batch().batch_size, 48);
        assert_eq!(cfg.total_steps(), 50 * 8);
        assert!(TrainConfig::reduced().validate().is_ok());
    }
}
