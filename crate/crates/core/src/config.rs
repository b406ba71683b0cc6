//! Model configuration, validation and the shipped reference configs.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Input geometry shared by every variant plus the architecture choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Frames per window (T).
    pub frames: usize,
    /// Chirps per frame (C).
    pub chirps: usize,
    /// Range bins (H).
    pub height: usize,
    /// Azimuth bins (W).
    pub width: usize,
    pub classes: usize,
    pub model: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Variant {
    Radarformer(MaxVitConfig),
    Cnn2d(CnnConfig),
    Transformer2d(VitConfig),
    Hourglass3d(HourglassConfig),
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Radarformer(_) => "radarformer",
            Variant::Cnn2d(_) => "cnn2d",
            Variant::Transformer2d(_) => "transformer2d",
            Variant::Hourglass3d(_) => "hourglass3d",
        }
    }

    pub fn stem(&self) -> Option<&StemConfig> {
        match self {
            Variant::Radarformer(c) => Some(&c.stem),
            Variant::Cnn2d(c) => Some(&c.stem),
            Variant::Transformer2d(c) => Some(&c.stem),
            Variant::Hourglass3d(_) => None,
        }
    }
}

/// Merge stream, convolutional stem and head around a 2D trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    /// Channels after fusing RF channels and chirps (C_h).
    pub merged_channels: usize,
    /// Kernel sizes of the two stem convolutions, non-decreasing.
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub head_kernel: usize,
}

impl StemConfig {
    /// Spatial reduction between the merged map and the trunk.
    pub fn factor(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxVitConfig {
    pub stem: StemConfig,
    /// Trunk embedding width (S).
    pub dim: usize,
    pub depth: usize,
    pub mbconv_kernel: usize,
    pub window: usize,
    pub grid: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub stem: StemConfig,
    pub dim: usize,
    pub depth: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub stem: StemConfig,
    /// Channel width of the stem output.
    pub dim: usize,
    /// Token embedding width (S).
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
}

/// 3D encoder-decoder used as the heavyweight baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HourglassConfig {
    pub merged_channels: usize,
    pub channels: Vec<usize>,
    /// Per-level (t, h, w) strides, each 1 or 2.
    pub strides: Vec<[usize; 3]>,
    pub encoder_kernel: [usize; 3],
    pub decoder_kernel: [usize; 3],
    pub bottleneck: usize,
}

pub const MLP_RATIO_RANGE: (usize, usize) = (20, 150);

fn check_odd(what: &str, k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(config_err!("{what} must be a positive odd kernel size, got {k}"));
    }
    Ok(())
}

fn check_attention(dim: usize, heads: usize, mlp_ratio: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(config_err!("embedding width {dim} is not divisible by {heads} heads"));
    }
    let (lo, hi) = MLP_RATIO_RANGE;
    if !(lo..=hi).contains(&mlp_ratio) {
        return Err(config_err!("mlp_ratio {mlp_ratio} outside [{lo}, {hi}]"));
    }
    Ok(())
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| config_err!("model config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Number of stride-2 temporal stages (log2 T).
    pub fn temporal_stages(&self) -> usize {
        self.frames.trailing_zeros() as usize
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 6] {
        [batch, 2, self.frames, self.chirps, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in
            [("frames", self.frames), ("chirps", self.chirps), ("height", self.height), ("width", self.width)]
        {
            if v == 0 {
                return Err(config_err!("{what} must be positive"));
            }
        }
        if self.classes == 0 {
            return Err(config_err!("classes must be positive"));
        }
        match &self.model {
            Variant::Hourglass3d(h) => self.validate_hourglass(h),
            v => {
                if !self.frames.is_power_of_two() {
                    return Err(config_err!("frames {} cannot be reduced to 1 by stride-2 stages", self.frames));
                }
                let stem = v.stem().expect("2D variants carry a stem");
                self.validate_stem(stem)?;
                let (h, w) = (self.height / stem.factor(), self.width / stem.factor());
                match v {
                    Variant::Radarformer(c) => {
                        check_attention(c.dim, c.heads, c.mlp_ratio)?;
                        check_odd("mbconv_kernel", c.mbconv_kernel)?;
                        if c.window == 0 || c.grid == 0 {
                            return Err(config_err!("window and grid sizes must be positive"));
                        }
                        if c.dim < 4 || c.dim % 4 != 0 {
                            return Err(config_err!("dim {} must be a positive multiple of 4", c.dim));
                        }
                    }
                    Variant::Cnn2d(c) => {
                        check_odd("kernel", c.kernel)?;
                        if c.dim == 0 {
                            return Err(config_err!("dim must be positive"));
                        }
                    }
                    Variant::Transformer2d(c) => {
                        check_attention(c.embed, c.heads, c.mlp_ratio)?;
                        if c.patch == 0 || h % c.patch != 0 || w % c.patch != 0 {
                            return Err(config_err!("patch {} does not divide the {h}x{w} trunk grid", c.patch));
                        }
                        if c.dim == 0 {
                            return Err(config_err!("dim must be positive"));
                        }
                    }
                    Variant::Hourglass3d(_) => unreachable!(),
                }
                Ok(())
            }
        }
    }

    fn validate_stem(&self, s: &StemConfig) -> Result<()> {
        if s.merged_channels == 0 {
            return Err(config_err!("merged_channels must be positive"));
        }
        if s.kernels.len() != 2 || s.strides.len() != 2 {
            return Err(config_err!("stem needs exactly two kernels and two strides"));
        }
        for &k in &s.kernels {
            check_odd("stem kernel", k)?;
        }
        if s.kernels[0] > s.kernels[1] {
            return Err(config_err!("stem kernels must be non-decreasing, got {:?}", s.kernels));
        }
        check_odd("head_kernel", s.head_kernel)?;
        if s.strides.iter().any(|&v| v == 0) {
            return Err(config_err!("stem strides must be positive"));
        }
        let f = s.factor();
        if self.height % f != 0 || self.width % f != 0 {
            return Err(config_err!("stem reduction {f} does not divide {}x{}", self.height, self.width));
        }
        Ok(())
    }

    fn validate_hourglass(&self, h: &HourglassConfig) -> Result<()> {
        if h.merged_channels == 0 || h.channels.iter().any(|&c| c == 0) {
            return Err(config_err!("hourglass channel widths must be positive"));
        }
        if h.channels.len() != h.strides.len() || h.channels.is_empty() {
            return Err(config_err!("hourglass needs one stride triple per level"));
        }
        for k in h.encoder_kernel.iter().chain(&h.decoder_kernel) {
            check_odd("hourglass kernel", *k)?;
        }
        let mut extent = [self.frames, self.height, self.width];
        for s in &h.strides {
            for a in 0..3 {
                if !(1..=2).contains(&s[a]) || extent[a] % s[a] != 0 {
                    return Err(config_err!("hourglass stride {s:?} does not divide extent {extent:?}"));
                }
                extent[a] /= s[a];
            }
        }
        Ok(())
    }

    pub fn reference_names() -> &'static [&'static str] {
        &["radarformer-ref", "cnn2d-ref", "transformer2d-ref", "hourglass3d-ref", "radarformer-tiny"]
    }

    /// Shipped configurations, by name.
    pub fn reference(name: &str) -> Option<Self> {
        let base = |name: &str, model| ModelConfig {
            name: name.to_string(),
            frames: 32,
            chirps: 4,
            height: 128,
            width: 128,
            classes: 3,
            model,
        };
        let stem = |strides: [usize; 2]| StemConfig {
            merged_channels: 8,
            kernels: vec![3, 5],
            strides: strides.to_vec(),
            head_kernel: 3,
        };
        let cfg = match name {
            "radarformer-ref" => base(
                name,
                Variant::Radarformer(MaxVitConfig {
                    stem: stem([2, 2]),
                    dim: 96,
                    depth: 7,
                    mbconv_kernel: 3,
                    window: 7,
                    grid: 7,
                    heads: 3,
                    mlp_ratio: 20,
                }),
            ),
            "cnn2d-ref" => base(name, Variant::Cnn2d(CnnConfig { stem: stem([2, 2]), dim: 96, depth: 14, kernel: 3 })),
            "transformer2d-ref" => base(
                name,
                Variant::Transformer2d(VitConfig {
                    stem: stem([1, 1]),
                    dim: 24,
                    embed: 352,
                    depth: 3,
                    heads: 8,
                    mlp_ratio: 20,
                    patch: 16,
                }),
            ),
            "hourglass3d-ref" => base(
                name,
                Variant::Hourglass3d(HourglassConfig {
                    merged_channels: 16,
                    channels: vec![48, 160, 312],
                    strides: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2]],
                    encoder_kernel: [9, 5, 5],
                    decoder_kernel: [3, 5, 5],
                    bottleneck: 2,
                }),
            ),
            "radarformer-tiny" => ModelConfig {
                frames: 16,
                height: 64,
                width: 64,
                ..base(
                    name,
                    Variant::Radarformer(MaxVitConfig {
                        stem: stem([2, 2]),
                        dim: 24,
                        depth: 2,
                        mbconv_kernel: 3,
                        window: 4,
                        grid: 4,
                        heads: 2,
                        mlp_ratio: 20,
                    }),
                )
            },
            _ => return None,
        };
        Some(cfg)
    }
}
