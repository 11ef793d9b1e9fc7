use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    ConvStem,
    MbConv,
    Transformer,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::ConvStem => "conv-stem",
            StageKind::MbConv => "mbconv",
            StageKind::Transformer => "transformer",
        }
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-stem" => Ok(StageKind::ConvStem),
            "mbconv" => Ok(StageKind::MbConv),
            "transformer" => Ok(StageKind::Transformer),
            other => Err(Error::Config(format!("unknown stage kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub blocks: usize,
    pub channels: usize,
    /// Applied by the first block of the stage; 1 or 2.
    pub stride: usize,
}

impl StageSpec {
    pub fn new(kind: StageKind, blocks: usize, channels: usize, stride: usize) -> Self {
        StageSpec {
            kind,
            blocks,
            channels,
            stride,
        }
    }

    /// Spatial extent after this stage for an input extent of `n`.
    ///
    /// Convolutional stages use same-padded strides (`ceil(n/2)`); attention
    /// stages downsample with 2×2 max pooling (`floor(n/2)`).
    pub fn output_extent(&self, n: usize) -> usize {
        match (self.stride, self.kind) {
            (1, _) => n,
            (_, StageKind::Transformer) => n / 2,
            _ => n.div_ceil(2),
        }
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.kind.as_str(),
            self.blocks,
            self.channels,
            self.stride
        )
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// `kind:blocks:channels:stride`, e.g. `mbconv:2:16:2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [kind, blocks, channels, stride] = parts[..] else {
            return Err(Error::Config(format!(
                "stage {s:?} must be kind:blocks:channels:stride"
            )));
        };
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| Error::Config(format!("stage {s:?}: {e}")))
        };
        Ok(StageSpec::new(kind.parse()?, num(blocks)?, num(channels)?, num(stride)?))
    }
}

/// Declarative layout of the hybrid network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// (channels, height, width) of input images.
    pub input: (usize, usize, usize),
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale layout: 8-channel stride-2 stem, two 16-channel MBConv
    /// blocks, two 16-channel attention blocks, on 3×32×32 inputs.
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            input: (3, 32, 32),
            stages: vec![
                StageSpec::new(StageKind::ConvStem, 1, 8, 2),
                StageSpec::new(StageKind::MbConv, 2, 16, 2),
                StageSpec::new(StageKind::Transformer, 2, 16, 2),
            ],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input extent {:?} must be positive", self.input)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        match self.stages.first() {
            Some(s) if s.kind == StageKind::ConvStem => {}
            _ => return Err(Error::Config("first stage must be conv-stem".into())),
        }
        let mut seen_mbconv = false;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return Err(Error::Config(format!("stage {i} ({s}) needs blocks and channels ≥ 1")));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Config(format!("stage {i} ({s}): stride must be 1 or 2")));
            }
            match s.kind {
                StageKind::ConvStem if i > 0 => {
                    return Err(Error::Config(format!("stage {i}: conv-stem must come first")))
                }
                StageKind::MbConv => seen_mbconv = true,
                StageKind::Transformer if !seen_mbconv => {
                    return Err(Error::Config(format!(
                        "stage {i}: an mbconv stage must precede the first transformer stage"
                    )))
                }
                _ => {}
            }
        }
        let (mut h, mut w) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            if s.kind == StageKind::Transformer && s.stride == 2 && (h < 2 || w < 2) {
                return Err(Error::Config(format!(
                    "stage {i}: cannot pool a {h}x{w} map"
                )));
            }
            h = s.output_extent(h);
            w = s.output_extent(w);
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("spatial extent vanishes after the strides".into()));
        }
        Ok(())
    }

    /// Spatial extent entering each stage, plus the final extent.
    pub fn extents(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.input.1, self.input.2)];
        for s in &self.stages {
            let &(h, w) = out.last().unwrap();
            out.push((s.output_extent(h), s.output_extent(w)));
        }
        out
    }

    /// Extent of the map produced by the last MBConv stage, if any.
    pub fn last_conv_extent(&self) -> Option<(usize, usize)> {
        let ext = self.extents();
        self.stages
            .iter()
            .rposition(|s| s.kind == StageKind::MbConv)
            .map(|i| ext[i + 1])
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.write_key_values(&mut kv);
        kv
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("input_channels", self.input.0);
        kv.set("input_height", self.input.1);
        kv.set("input_width", self.input.2);
        kv.set(
            "stages",
            self.stages
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("num_classes", self.num_classes);
        kv.set("seed", self.seed);
    }

    /// Reads a config, taking anything missing from `defaults`.
    pub fn from_key_values(kv: &KeyValues, defaults: &ModelConfig) -> Result<Self> {
        let stages = match kv.get("stages") {
            Some(s) => s
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<StageSpec>>>()?,
            None => defaults.stages.clone(),
        };
        let cfg = ModelConfig {
            input: (
                kv.parse_or("input_channels", defaults.input.0)?,
                kv.parse_or("input_height", defaults.input.1)?,
                kv.parse_or("input_width", defaults.input.2)?,
            ),
            stages,
            num_classes: kv.parse_or("num_classes", defaults.num_classes)?,
            seed: kv.parse_or("seed", defaults.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
