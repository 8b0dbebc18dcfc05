//! Backbone description and the convolution layout derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_float_bits() -> u32 {
    32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

impl Default for StemSpec {
    fn default() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            max_pool: false,
        }
    }
}

/// A residual CNN made of stages of basic blocks (two 3×3 convolutions with
/// batch normalization and an identity or 1×1 downsample skip).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_initial_filters: usize,
    #[serde(default = "default_float_bits")]
    pub float_bits: u32,
    #[serde(default)]
    pub stem: StemSpec,
}

impl BackboneSpec {
    /// ResNet-18 layout: 7×7/2 stem with max pooling, four stages of two
    /// blocks each.
    pub fn resnet18(input_channels: usize) -> Self {
        Self {
            input_channels,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            num_initial_filters: 64,
            float_bits: 32,
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
        }
    }

    /// Desk-scale miniature with the same attachment points as ResNet-18.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            input_channels,
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            num_initial_filters: 8,
            float_bits: 32,
            stem: StemSpec::default(),
        }
    }

    pub fn preset(name: &str, input_channels: usize) -> Result<Self> {
        match name {
            "resnet18" => Ok(Self::resnet18(input_channels)),
            "tiny" => Ok(Self::tiny(input_channels)),
            other => Err(Error::InvalidBackbone(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::InvalidBackbone(format!(
                "stage_widths ({}) and blocks_per_stage ({}) must have equal nonzero length",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        let counts = [self.input_channels, self.num_initial_filters, self.float_bits as usize];
        if counts.iter().any(|&c| c == 0)
            || self.stage_widths.iter().any(|&w| w == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(Error::InvalidBackbone(
                "all widths, counts and float_bits must be positive".into(),
            ));
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 || self.stem.kernel % 2 == 0 {
            return Err(Error::InvalidBackbone(
                "stem kernel must be odd and positive, stride positive".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<BackboneLayout> {
        self.validate()?;
        let stem = ConvLayer {
            name: "stem".into(),
            c_in: self.input_channels,
            c_out: self.num_initial_filters,
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            padding: self.stem.kernel / 2,
            role: ConvRole::Stem,
        };
        let mut blocks = Vec::new();
        let mut c_in = self.num_initial_filters;
        for (s, (&width, &count)) in self
            .stage_widths
            .iter()
            .zip(&self.blocks_per_stage)
            .enumerate()
        {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let prefix = format!("s{s}.b{b}");
                let conv = |name: &str, c_in, stride| ConvLayer {
                    name: format!("{prefix}.{name}"),
                    c_in,
                    c_out: width,
                    kernel: 3,
                    stride,
                    padding: 1,
                    role: ConvRole::Block,
                };
                let downsample = (stride != 1 || c_in != width).then(|| ConvLayer {
                    name: format!("{prefix}.down"),
                    c_in,
                    c_out: width,
                    kernel: 1,
                    stride,
                    padding: 0,
                    role: ConvRole::Downsample,
                });
                blocks.push(BlockLayout {
                    conv1: conv("conv1", c_in, stride),
                    conv2: conv("conv2", width, 1),
                    downsample,
                });
                c_in = width;
            }
        }
        Ok(BackboneLayout {
            stem,
            max_pool: self.stem.max_pool,
            blocks,
            feature_dim: c_in,
        })
    }

    /// Number of backbone parameters (convolution weights plus batch-norm
    /// affine terms); running statistics are not parameters.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .layout()?
            .convs()
            .map(|c| c.weight_count() + 2 * c.c_out)
            .sum())
    }

    pub fn backbone_bits(&self) -> Result<u64> {
        Ok(self.parameter_count()? as u64 * self.float_bits as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvRole {
    Stem,
    Block,
    Downsample,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub role: ConvRole,
}

impl ConvLayer {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    /// Residual adapters attach to every convolution of a residual unit; the
    /// stem is not part of one.
    pub fn takes_adapter(&self) -> bool {
        self.role != ConvRole::Stem
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub downsample: Option<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneLayout {
    pub stem: ConvLayer,
    pub max_pool: bool,
    pub blocks: Vec<BlockLayout>,
    pub feature_dim: usize,
}

impl BackboneLayout {
    /// Every convolution in forward order.
    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.stem).chain(
            self.blocks
                .iter()
                .flat_map(|b| [Some(&b.conv1), Some(&b.conv2), b.downsample.as_ref()])
                .flatten(),
        )
    }
}
