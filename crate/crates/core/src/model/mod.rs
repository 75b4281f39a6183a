//! U-Net with local attention bottlenecks on its skip connections.

mod checkpoint;
mod network;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{decode as decode_tensors, encode as encode_tensors, write_atomic};
pub use network::{ForwardOutput, Mode, Network};

use crate::attention::{AttentionError, HbaConfig};
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input {found} does not match the network (expected {expected})")]
    Input { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was written for a different network config:\n{detail}")]
    ConfigMismatch { detail: String },
}

/// The five rows of the ablation ladder, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetResnet,
    SelfAtt,
    Hba1,
    HbaAll,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [Variant::Unet, Variant::UnetResnet, Variant::SelfAtt, Variant::Hba1, Variant::HbaAll];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetResnet => "unet+resnet",
            Variant::SelfAtt => "unet+resnet+selfatt",
            Variant::Hba1 => "hba1",
            Variant::HbaAll => "hba-all",
        }
    }

    /// Residual encoder blocks.
    pub fn residual(self) -> bool {
        self != Variant::Unet
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::SelfAtt | Variant::Hba1 | Variant::HbaAll)
    }

    /// Encoder levels (0 = full resolution, `levels` = center) that carry a
    /// local attention bottleneck.
    pub fn attention_levels(self, levels: usize) -> Vec<usize> {
        match self {
            Variant::Unet | Variant::UnetResnet => vec![],
            Variant::SelfAtt | Variant::Hba1 => vec![levels],
            Variant::HbaAll => (0..=levels).collect(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet" => Ok(Variant::Unet),
            "unet+resnet" | "resnet" => Ok(Variant::UnetResnet),
            "unet+resnet+selfatt" | "selfatt" | "self-att" => Ok(Variant::SelfAtt),
            "hba1" | "hba-1" => Ok(Variant::Hba1),
            "hba-all" | "hbaall" | "hba_all" => Ok(Variant::HbaAll),
            other => Err(ModelError::Config(format!(
                "unknown variant `{other}` (expected one of: {})",
                Variant::LADDER.map(Variant::name).join(", ")
            ))),
        }
    }
}

/// Architecture descriptor. Inputs are square; every skip map at level `i`
/// has side `input_size / 2^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Number of downsampling steps; the center block runs at `input_size / 2^levels`.
    pub levels: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    /// Width expansion of residual encoder stages after the stem.
    pub residual_expansion: usize,
    /// Side S of the grid every attended skip map is pooled to.
    pub attention_grid: usize,
    /// Width the skip map is projected to before attention.
    pub attention_channels: usize,
    pub attention_heads: usize,
    pub variant: Variant,
    pub input_size: usize,
    pub input_channels: usize,
    pub output_classes: usize,
    /// Concatenate the input image into the last decoder block.
    pub concat_input: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::toy(Variant::HbaAll)
    }
}

impl NetworkConfig {
    /// Desk-scale network for 128² inputs.
    pub fn toy(variant: Variant) -> Self {
        NetworkConfig {
            levels: 3,
            base_channels: 8,
            channel_multiplier: 2,
            residual_expansion: 2,
            attention_grid: 8,
            attention_channels: 16,
            attention_heads: 4,
            variant,
            input_size: 128,
            input_channels: 3,
            output_classes: 2,
            concat_input: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// 512² network with ResNet-50 stage widths (256/512/1024/2048) in the encoder.
    pub fn full_scale(variant: Variant) -> Self {
        NetworkConfig {
            levels: 4,
            base_channels: 64,
            residual_expansion: 4,
            attention_grid: 16,
            attention_channels: 128,
            input_size: 512,
            ..NetworkConfig::toy(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        NetworkConfig { variant, ..self.clone() }
    }

    /// Side of the feature maps at `level`.
    pub fn side(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn encoder_width(&self, level: usize) -> usize {
        if self.variant.residual() && level > 0 {
            self.base_channels * self.channel_multiplier.pow(level as u32 - 1) * self.residual_expansion
        } else {
            self.base_channels * self.channel_multiplier.pow(level as u32)
        }
    }

    pub fn decoder_width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }

    pub fn hba_config(&self) -> HbaConfig {
        let mut cfg = HbaConfig::new(self.attention_channels, self.attention_heads, self.attention_grid);
        if self.variant == Variant::SelfAtt {
            cfg = cfg.content_only();
        }
        cfg
    }

    /// Pooling rate of the bottleneck at `level`.
    pub fn pool_rate(&self, level: usize) -> usize {
        self.side(level) / self.attention_grid
    }

    /// Input sizes this config accepts.
    fn size_quantum(&self) -> usize {
        let q = 1usize << self.levels.min(20);
        if self.variant.has_attention() {
            q * self.attention_grid.max(1)
        } else {
            q
        }
    }

    fn valid_sizes_hint(&self) -> String {
        let q = self.size_quantum();
        let near = (self.input_size / q).max(1);
        let lo = near.saturating_sub(2).max(1);
        let sizes: Vec<String> = (lo..lo + 5).map(|k| (k * q).to_string()).collect();
        format!("valid sizes are multiples of {q}: {}, …", sizes.join(", "))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.levels == 0 || self.levels > 8 {
            return fail(format!("levels must be in 1..=8, got {}", self.levels));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("channel_multiplier", self.channel_multiplier),
            ("residual_expansion", self.residual_expansion),
            ("input_channels", self.input_channels),
            ("output_classes", self.output_classes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be ≥ 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return fail("bn_momentum must be in [0,1] and bn_eps > 0".into());
        }
        if self.input_size == 0 || self.input_size % self.size_quantum() != 0 {
            let why = if self.variant.has_attention() {
                format!(
                    "input size {} must be divisible by 2^levels = {} and leave a center map whose side is a multiple of the attention grid {}",
                    self.input_size,
                    1usize << self.levels,
                    self.attention_grid
                )
            } else {
                format!("input size {} must be divisible by 2^levels = {}", self.input_size, 1usize << self.levels)
            };
            return fail(format!("{why}; {}", self.valid_sizes_hint()));
        }
        if self.variant.has_attention() {
            if self.attention_grid == 0 {
                return fail("attention_grid must be ≥ 1".into());
            }
            self.hba_config().validate()?;
        }
        Ok(())
    }

    /// Key/value pairs in a fixed order; [`NetworkConfig::set`] reads them back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("channel_multiplier", self.channel_multiplier.to_string()),
            ("residual_expansion", self.residual_expansion.to_string()),
            ("attention_grid", self.attention_grid.to_string()),
            ("attention_channels", self.attention_channels.to_string()),
            ("attention_heads", self.attention_heads.to_string()),
            ("variant", self.variant.name().to_string()),
            ("input_size", self.input_size.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("output_classes", self.output_classes.to_string()),
            ("concat_input", self.concat_input.to_string()),
            ("bn_momentum", format!("{:?}", self.bn_momentum)),
            ("bn_eps", format!("{:?}", self.bn_eps)),
        ]
    }

    /// Canonical text form, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(ModelError::Config(format!("unknown network key `{}`", k.trim())));
            }
        }
        Ok(cfg)
    }

    /// Sets one field. Returns `false` when `key` is not a network key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ModelError> {
            value.parse().map_err(|_| ModelError::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "levels" => self.levels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "channel_multiplier" => self.channel_multiplier = parse(key, value)?,
            "residual_expansion" => self.residual_expansion = parse(key, value)?,
            "attention_grid" => self.attention_grid = parse(key, value)?,
            "attention_channels" => self.attention_channels = parse(key, value)?,
            "attention_heads" => self.attention_heads = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "input_size" => {
                // Accept `128` or `128x128`.
                let (h, w) = value.split_once(['x', '×']).unwrap_or((value, value));
                let (h, w): (usize, usize) = (parse(key, h.trim())?, parse(key, w.trim())?);
                if h != w {
                    return Err(ModelError::Config(format!("input_size must be square, got {h}×{w}")));
                }
                self.input_size = h;
            }
            "input_channels" => self.input_channels = parse(key, value)?,
            "output_classes" => self.output_classes = parse(key, value)?,
            "concat_input" => self.concat_input = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "bn_eps" => self.bn_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Exact number of learnable scalars, computed from the layer recipe
    /// without allocating weights.
    pub fn param_count(&self) -> Result<usize, ModelError> {
        self.validate()?;
        Ok(network::recipe(self).iter().map(network::Entry::learnable).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::LADDER {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("transformer".parse::<Variant>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = NetworkConfig::full_scale(Variant::Hba1);
        cfg.bn_momentum = 0.05;
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn indivisible_size_lists_valid_sizes() {
        let cfg = NetworkConfig { input_size: 100, ..NetworkConfig::toy(Variant::Unet) };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("multiples of 8"), "{msg}");
        assert!(msg.contains("96") && msg.contains("104"), "{msg}");
        let att = NetworkConfig { input_size: 96, ..NetworkConfig::toy(Variant::HbaAll) };
        let msg = att.validate().unwrap_err().to_string();
        assert!(msg.contains("multiples of 64") && msg.contains("128"), "{msg}");
    }

    #[test]
    fn full_scale_encoder_uses_resnet_stage_widths() {
        let cfg = NetworkConfig::full_scale(Variant::HbaAll);
        let widths: Vec<usize> = (0..=4).map(|i| cfg.encoder_width(i)).collect();
        assert_eq!(widths, [64, 256, 512, 1024, 2048]);
        assert_eq!((0..=4).map(|i| cfg.pool_rate(i)).collect::<Vec<_>>(), [32, 16, 8, 4, 2]);
    }

    #[test]
    fn attention_levels_by_variant() {
        assert!(Variant::Unet.attention_levels(3).is_empty());
        assert_eq!(Variant::Hba1.attention_levels(3), [3]);
        assert_eq!(Variant::HbaAll.attention_levels(3), [0, 1, 2, 3]);
    }
}
