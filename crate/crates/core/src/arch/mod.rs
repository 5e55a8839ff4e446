//! Generator and discriminator stacks for the CNN baseline and the FCC-GAN
//! variants, plus an executor that runs a stack on the tape.

mod build;
mod network;
mod spec;

use std::fmt;
use std::str::FromStr;

pub use build::{build_ablation, build_discriminator, build_generator, fc_schedule};
pub use network::{init_parameters, Network, BN_EPS, BN_MOMENTUM, INIT_STD};
pub use spec::{FeatureShape, LayerSpec, ModelSpec};

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::objectives::Objective;

/// Discriminator activation between hidden layers.
pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) const LRELU: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Svhn,
    Celeba,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Mnist,
        DatasetKind::Cifar10,
        DatasetKind::Svhn,
        DatasetKind::Celeba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Svhn => "svhn",
            DatasetKind::Celeba => "celeba",
        }
    }

    pub fn image_shape(self) -> FeatureShape {
        match self {
            DatasetKind::Mnist => FeatureShape::Map { c: 1, h: 28, w: 28 },
            DatasetKind::Cifar10 | DatasetKind::Svhn => FeatureShape::Map { c: 3, h: 32, w: 32 },
            DatasetKind::Celeba => FeatureShape::Map { c: 3, h: 64, w: 64 },
        }
    }

    /// Number of label classes, if the dataset is labeled.
    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetKind::Celeba => None,
            _ => Some(10),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset `{s}` (expected mnist, cifar10, svhn or celeba)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Cnn,
    /// Fully connected stacks, strided-convolution downsampling.
    FccganS,
    /// Fully connected stacks, unit-stride convolution plus average pooling.
    FccganP,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cnn, Variant::FccganS, Variant::FccganP];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::FccganS => "fccgan-s",
            Variant::FccganP => "fccgan-p",
        }
    }

    pub fn is_fcc(self) -> bool {
        self != Variant::Cnn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Variant::Cnn),
            "fccgan-s" | "fccgan_s" => Ok(Variant::FccganS),
            "fccgan-p" | "fccgan_p" => Ok(Variant::FccganP),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected cnn, fccgan-s or fccgan-p)"
            ))),
        }
    }
}

pub const FC_DEPTHS: std::ops::RangeInclusive<usize> = 1..=5;
pub const CONV_DEPTHS: [usize; 2] = [4, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchitectureConfig {
    pub dataset: DatasetKind,
    pub variant: Variant,
    /// Overrides `variant` for the generator alone.
    pub variant_g: Option<Variant>,
    /// Overrides `variant` for the discriminator alone.
    pub variant_d: Option<Variant>,
    pub objective: Objective,
    /// Fully connected layers between the noise and the first feature map.
    pub fc_layers_g: usize,
    /// Hidden fully connected layers before the single output node.
    pub fc_layers_d: usize,
    pub conv_depth_g: usize,
    pub conv_depth_d: usize,
    pub bn_generator: bool,
    pub bn_discriminator: bool,
    pub noise_dim: usize,
}

impl ArchitectureConfig {
    pub fn new(dataset: DatasetKind, variant: Variant) -> Self {
        ArchitectureConfig {
            dataset,
            variant,
            variant_g: None,
            variant_d: None,
            objective: Objective::Standard,
            fc_layers_g: 3,
            fc_layers_d: 3,
            conv_depth_g: 4,
            conv_depth_d: 4,
            bn_generator: true,
            bn_discriminator: true,
            noise_dim: 100,
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn generator_variant(&self) -> Variant {
        self.variant_g.unwrap_or(self.variant)
    }

    pub fn discriminator_variant(&self) -> Variant {
        self.variant_d.unwrap_or(self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("fc_layers_g", self.fc_layers_g),
            ("fc_layers_d", self.fc_layers_d),
        ] {
            if !FC_DEPTHS.contains(&v) {
                return Err(Error::Config(format!(
                    "{key} must be in {}..{}, got {v}",
                    FC_DEPTHS.start(),
                    FC_DEPTHS.end()
                )));
            }
        }
        for (key, v) in [
            ("conv_depth_g", self.conv_depth_g),
            ("conv_depth_d", self.conv_depth_d),
        ] {
            if !CONV_DEPTHS.contains(&v) {
                return Err(Error::Config(format!("{key} must be 4 or 7, got {v}")));
            }
            if v == 7 && !matches!(self.dataset, DatasetKind::Cifar10 | DatasetKind::Svhn) {
                return Err(Error::Config(format!(
                    "{key} 7 is only defined for 32x32 inputs (cifar10, svhn), not {}",
                    self.dataset
                )));
            }
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Both stacks in text form, as printed by `fccgan describe`.
pub fn describe(cfg: &ArchitectureConfig) -> Result<String> {
    let (g, d) = build_ablation(cfg)?;
    Ok(format!("[generator]\n{g}\n[discriminator]\n{d}"))
}
