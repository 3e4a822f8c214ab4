use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PoolMode;

pub const SUPPORTED_IN_CHANNELS: [usize; 4] = [1, 3, 11, 21];
/// Width of the final features, the SAM vector and the high-level vector.
pub const FEATURE_CHANNELS: usize = 256;
pub const INPUT_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Global average pooling then one dense classifier.
    Cam,
    /// Local pooling into minor features, one single-output unit per map,
    /// then the classifier.
    Sam,
    /// SAM with the high-level vector fused into the classifier input.
    Hesam,
}

/// Global pooling flavour named the way the ablation tables name it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Gap,
    Gmp,
}

impl Pooling {
    pub fn mode(self) -> PoolMode {
        match self {
            Pooling::Gap => PoolMode::Avg,
            Pooling::Gmp => PoolMode::Max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `H + d`, classifier over 256 inputs; maps stay defined.
    Sum,
    /// `[H; d]`, classifier over 512 inputs; maps are undefined.
    Concat,
}

macro_rules! display_lower {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::Config(format!("unknown value {other:?}"))),
                }
            }
        }
    };
}

display_lower!(HeadKind { Cam => "cam", Sam => "sam", Hesam => "hesam" });
display_lower!(Pooling { Gap => "gap", Gmp => "gmp" });
display_lower!(Fusion { Sum => "sum", Concat => "concat" });

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub head: HeadKind,
    /// Global pooling of the 256x4x4 bottleneck into the high-level vector.
    pub hf_pool: Pooling,
    /// Windowed pooling of the final features into minor features.
    pub fcf_pool: Pooling,
    pub fusion: Fusion,
    pub use_residual_stack: bool,
    pub use_hf_branch: bool,
    /// Width of the UNet 1x1 output conv.
    pub unet_out_channels: usize,
    /// Batch norm inside the UNet double-conv blocks.
    pub unet_batchnorm: bool,
    /// Replace the high-level vector by zeros (fusion identity checks).
    pub zero_high_level: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::hesam(11)
    }
}

impl ModelConfig {
    pub fn hesam(in_channels: usize) -> Self {
        Self {
            in_channels,
            head: HeadKind::Hesam,
            hf_pool: Pooling::Gmp,
            fcf_pool: Pooling::Gap,
            fusion: Fusion::Sum,
            use_residual_stack: true,
            use_hf_branch: true,
            unet_out_channels: 64,
            unet_batchnorm: false,
            zero_high_level: false,
        }
    }

    pub fn sam(in_channels: usize) -> Self {
        Self {
            head: HeadKind::Sam,
            use_hf_branch: false,
            ..Self::hesam(in_channels)
        }
    }

    pub fn cam(in_channels: usize) -> Self {
        Self {
            head: HeadKind::Cam,
            use_hf_branch: false,
            ..Self::hesam(in_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_IN_CHANNELS.contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be one of {SUPPORTED_IN_CHANNELS:?}, got {}",
                self.in_channels
            )));
        }
        if self.unet_out_channels == 0 {
            return Err(Error::Config("unet_out_channels must be >= 1".into()));
        }
        match (self.head, self.use_hf_branch) {
            (HeadKind::Hesam, false) => {
                return Err(Error::Config("hesam head requires the high-level branch".into()))
            }
            (HeadKind::Cam | HeadKind::Sam, true) => {
                return Err(Error::Config(format!(
                    "high-level branch only feeds the hesam head, not {}",
                    self.head
                )))
            }
            _ => {}
        }
        if self.fusion == Fusion::Concat && self.head != HeadKind::Hesam {
            return Err(Error::Config("concat fusion applies to the hesam head only".into()));
        }
        if self.final_channels() != FEATURE_CHANNELS {
            return Err(Error::Config(format!(
                "final features must have {FEATURE_CHANNELS} channels (SAM fan-out and \
                 high-level vector length); without the residual stack set unet_out_channels \
                 to {FEATURE_CHANNELS}, got {}",
                self.unet_out_channels
            )));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        if self.use_residual_stack {
            FEATURE_CHANNELS
        } else {
            self.unet_out_channels
        }
    }

    /// Spatial extent of the final features for a 32x32 input.
    pub fn final_size(&self) -> usize {
        if self.use_residual_stack {
            INPUT_SIZE / 2
        } else {
            INPUT_SIZE
        }
    }

    /// `(kernel, stride)` of the minor-feature pooling; both settings give 6x6.
    pub fn minor_window(&self) -> (usize, usize) {
        if self.use_residual_stack {
            (5, 2)
        } else {
            (7, 5)
        }
    }

    /// Whether spatial attention maps can be formed from the classifier.
    pub fn maps_defined(&self) -> bool {
        !(self.head == HeadKind::Hesam && self.fusion == Fusion::Concat)
    }

    /// Compact label such as `hesam/gmp/gap/sum/rb` used in reports.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}{}{}",
            self.head,
            self.hf_pool,
            self.fcf_pool,
            self.fusion,
            if self.use_residual_stack { "/rb" } else { "" },
            if self.zero_high_level { "/d0" } else { "" },
        )
    }
}
