//! Network configuration and presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which branches run the shared first group, and which modality guides
/// the cross-attention stage. `XtoY` means the image (X) guides the clicks
/// (Y): clicks supply queries, image features supply keys and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WiringVariant {
    #[serde(rename = "X_only_YtoX")]
    XOnlyYtoX,
    #[serde(rename = "X_only_XtoY")]
    XOnlyXtoY,
    #[serde(rename = "XY_YtoX")]
    XyYtoX,
    #[default]
    #[serde(rename = "XY_XtoY")]
    XyXtoY,
}

impl WiringVariant {
    pub const ALL: [WiringVariant; 4] = [
        WiringVariant::XOnlyYtoX,
        WiringVariant::XOnlyXtoY,
        WiringVariant::XyYtoX,
        WiringVariant::XyXtoY,
    ];

    /// Whether the click branch passes through the shared first group.
    pub fn clicks_use_first_group(self) -> bool {
        matches!(self, WiringVariant::XyYtoX | WiringVariant::XyXtoY)
    }

    /// Whether image features guide click features.
    pub fn image_guides(self) -> bool {
        matches!(self, WiringVariant::XOnlyXtoY | WiringVariant::XyXtoY)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WiringVariant::XOnlyYtoX => "X_only_YtoX",
            WiringVariant::XOnlyXtoY => "X_only_XtoY",
            WiringVariant::XyYtoX => "XY_YtoX",
            WiringVariant::XyXtoY => "XY_XtoY",
        }
    }
}

impl std::str::FromStr for WiringVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WiringVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown wiring variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Plain,
    /// Windowed hierarchical backbone; accepted in config files but not buildable.
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub shared_depth: usize,
    pub cross_depth: usize,
    pub second_depth: usize,
    pub ffn_hidden: usize,
    #[serde(default)]
    pub variant: WiringVariant,
    pub image_side: usize,
    #[serde(default)]
    pub backbone: BackboneKind,
    /// Output channels of the four pyramid levels, finest first.
    #[serde(default)]
    pub neck_channels: Option<[usize; 4]>,
    /// Width of the decode head.
    #[serde(default)]
    pub head_channels: Option<usize>,
    #[serde(default)]
    pub click_radius: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

pub const MAX_CROSS_DEPTH: usize = 8;
pub const LN_EPS: f64 = 1e-6;
pub const INPUT_CHANNELS: usize = 3;

impl ModelConfig {
    /// Plain ViT-B sized network at 448 input.
    pub fn full() -> Self {
        Self {
            dim: 768,
            patch_size: 16,
            heads: 8,
            shared_depth: 6,
            cross_depth: 3,
            second_depth: 6,
            ffn_hidden: 3072,
            variant: WiringVariant::XyXtoY,
            image_side: 448,
            backbone: BackboneKind::Plain,
            neck_channels: Some([128, 256, 512, 1024]),
            head_channels: Some(256),
            click_radius: Some(5),
            dropout: 0.0,
        }
    }

    /// Desk-scale network: 64 px input, 8 px patches, width 64.
    pub fn tiny() -> Self {
        Self {
            dim: 64,
            patch_size: 8,
            heads: 4,
            shared_depth: 2,
            cross_depth: 1,
            second_depth: 2,
            ffn_hidden: 128,
            variant: WiringVariant::XyXtoY,
            image_side: 64,
            backbone: BackboneKind::Plain,
            neck_channels: Some([16, 32, 64, 128]),
            head_channels: Some(32),
            click_radius: Some(2),
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected tiny or full)"))),
        }
    }

    pub fn neck_channels(&self) -> [usize; 4] {
        self.neck_channels
            .unwrap_or([self.dim / 4, self.dim / 2, self.dim, self.dim * 2])
    }

    pub fn head_channels(&self) -> usize {
        self.head_channels.unwrap_or(self.dim / 2)
    }

    pub fn click_radius(&self) -> usize {
        self.click_radius.unwrap_or(5)
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone == BackboneKind::Hierarchical {
            return Err(Error::Unimplemented(
                "hierarchical (windowed) backbone is not implemented".into(),
            ));
        }
        let positive = [
            ("dim", self.dim),
            ("patch_size", self.patch_size),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("image_side", self.image_side),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.patch_size % 4 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of 4 for the pyramid neck",
                self.patch_size
            )));
        }
        if self.grid_side() % 2 != 0 {
            return Err(Error::Config(format!(
                "token grid side {} must be even for the stride-2 pyramid level",
                self.grid_side()
            )));
        }
        if self.cross_depth > MAX_CROSS_DEPTH {
            return Err(Error::Config(format!(
                "cross_depth {} exceeds {MAX_CROSS_DEPTH}",
                self.cross_depth
            )));
        }
        if self.neck_channels().contains(&0) || self.head_channels() == 0 || self.dim < 4 {
            return Err(Error::Config("neck and head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
