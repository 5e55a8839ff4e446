use super::{ArchitectureConfig, DatasetKind, FeatureShape, LayerSpec, ModelSpec, Variant, LRELU};
use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::tensor::ConvGeometry;

/// Spatial sizes and channel counts of the convolutional trunk, from the
/// smallest feature map up to the image.
struct Trunk {
    kernel: usize,
    sizes: &'static [usize],
    channels: &'static [usize],
    image_channels: usize,
}

impl Trunk {
    fn of(dataset: DatasetKind) -> Trunk {
        match dataset {
            DatasetKind::Mnist => Trunk {
                kernel: 3,
                sizes: &[3, 7, 14, 28],
                channels: &[128, 64, 32],
                image_channels: 1,
            },
            DatasetKind::Cifar10 | DatasetKind::Svhn => Trunk {
                kernel: 4,
                sizes: &[4, 8, 16, 32],
                channels: &[256, 128, 64],
                image_channels: 3,
            },
            DatasetKind::Celeba => Trunk {
                kernel: 4,
                sizes: &[4, 8, 16, 32, 64],
                channels: &[512, 256, 128, 64],
                image_channels: 3,
            },
        }
    }

    fn steps(&self) -> usize {
        self.sizes.len() - 1
    }

    fn flat_size(&self) -> usize {
        self.channels[0] * self.sizes[0] * self.sizes[0]
    }
}

fn unsatisfiable(what: String) -> Error {
    Error::Config(format!("no padding realizes {what}"))
}

/// Transposed-convolution padding (smaller than the kernel) that maps `from`
/// to `to` pixels.
fn up_geometry(kernel: usize, stride: usize, from: usize, to: usize) -> Result<ConvGeometry> {
    let grown = (from - 1) * stride + kernel;
    let excess = grown
        .checked_sub(to)
        .ok_or_else(|| unsatisfiable(format!("{from}->{to} with kernel {kernel}")))?;
    let pad = excess.div_ceil(2);
    if pad >= kernel {
        return Err(unsatisfiable(format!(
            "{from}->{to} with kernel {kernel}, stride {stride}"
        )));
    }
    let g = ConvGeometry::new(kernel, stride, pad).with_output_pad(2 * pad - excess);
    g.validate()?;
    Ok(g)
}

/// Smallest symmetric padding for which a strided convolution maps `from` to `to`.
fn down_geometry(kernel: usize, stride: usize, from: usize, to: usize) -> Result<ConvGeometry> {
    (0..kernel)
        .map(|pad| ConvGeometry::new(kernel, stride, pad))
        .find(|g| g.conv_output(from).ok() == Some(to))
        .ok_or_else(|| {
            unsatisfiable(format!(
                "{from}->{to} with kernel {kernel}, stride {stride}"
            ))
        })
}

/// Unit-stride convolution producing `2·to` pixels so a 2×2 pool lands on `to`.
fn pooled_geometry(kernel: usize, from: usize, to: usize) -> Result<ConvGeometry> {
    let total = (2 * to + kernel - 1)
        .checked_sub(from)
        .ok_or_else(|| unsatisfiable(format!("{from}->{}x2 with kernel {kernel}", to)))?;
    Ok(ConvGeometry::new(kernel, 1, total / 2).with_pad_extra(total % 2))
}

fn same_3x3() -> ConvGeometry {
    ConvGeometry::new(3, 1, 1)
}

/// Node counts for a stack of `depth` fully connected layers passing through
/// three anchors. Depth 3 reproduces the anchors; other depths interpolate
/// log-linearly along the anchor path; depth 1 keeps only `single`.
pub fn fc_schedule(anchors: [usize; 3], depth: usize, single: usize) -> Vec<usize> {
    if depth <= 1 {
        return vec![single];
    }
    let [a, b, c] = anchors.map(|x| x as f64);
    (0..depth)
        .map(|i| {
            let t = i as f64 / (depth - 1) as f64;
            let v = if t <= 0.5 {
                a * (b / a).powf(2.0 * t)
            } else {
                b * (c / b).powf(2.0 * t - 1.0)
            };
            v.round() as usize
        })
        .collect()
}

fn norm_act(layers: &mut Vec<LayerSpec>, bn: bool, act: Activation) {
    if bn {
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::Act(act));
}

pub fn build_generator(cfg: &ArchitectureConfig) -> Result<ModelSpec> {
    cfg.validate()?;
    let trunk = Trunk::of(cfg.dataset);
    let bn = cfg.bn_generator;
    let deep = cfg.conv_depth_g == 7;
    let k = trunk.kernel;
    let mut layers = Vec::new();

    match cfg.generator_variant() {
        Variant::Cnn => {
            layers.push(LayerSpec::reshape(1, 1, cfg.noise_dim));
            let g = up_geometry(k, 1, 1, trunk.sizes[0])?;
            layers.push(LayerSpec::conv_t(trunk.channels[0], g));
            norm_act(&mut layers, bn, Activation::Relu);
        }
        Variant::FccganS | Variant::FccganP => {
            let nodes = fc_schedule(
                [64, 512, trunk.flat_size()],
                cfg.fc_layers_g,
                trunk.flat_size(),
            );
            let last = nodes.len() - 1;
            for (i, n) in nodes.into_iter().enumerate() {
                layers.push(LayerSpec::fc(n));
                norm_act(&mut layers, bn && i == last, Activation::Relu);
            }
            let s = trunk.sizes[0];
            layers.push(LayerSpec::reshape(s, s, trunk.channels[0]));
        }
    }
    if deep {
        layers.push(LayerSpec::conv(trunk.channels[0], same_3x3()));
        norm_act(&mut layers, bn, Activation::Relu);
    }
    for i in 1..=trunk.steps() {
        let g = up_geometry(k, 2, trunk.sizes[i - 1], trunk.sizes[i])?;
        if i == trunk.steps() {
            layers.push(LayerSpec::conv_t(trunk.image_channels, g));
            layers.push(LayerSpec::Act(Activation::Tanh));
        } else {
            layers.push(LayerSpec::conv_t(trunk.channels[i], g));
            norm_act(&mut layers, bn, Activation::Relu);
            if deep {
                layers.push(LayerSpec::conv(trunk.channels[i], same_3x3()));
                norm_act(&mut layers, bn, Activation::Relu);
            }
        }
    }
    ModelSpec::with_output(
        FeatureShape::Flat(cfg.noise_dim),
        layers,
        cfg.dataset.image_shape(),
    )
}

pub fn build_discriminator(cfg: &ArchitectureConfig) -> Result<ModelSpec> {
    cfg.validate()?;
    let trunk = Trunk::of(cfg.dataset);
    let bn = cfg.bn_discriminator;
    let deep = cfg.conv_depth_d == 7;
    let variant = cfg.discriminator_variant();
    let k = trunk.kernel;
    let steps = trunk.steps();
    let mut layers = Vec::new();

    for i in 0..steps {
        let from = trunk.sizes[steps - i];
        let to = trunk.sizes[steps - i - 1];
        let filters = trunk.channels[steps - 1 - i];
        if deep {
            layers.push(LayerSpec::conv(filters, same_3x3()));
            norm_act(&mut layers, bn, LRELU);
        }
        // The deep CNN discriminator widens its second downsampling layer.
        let down_filters = if deep && variant == Variant::Cnn && i == 1 {
            trunk.channels[steps - 1 - (i + 1)]
        } else {
            filters
        };
        if variant == Variant::FccganP {
            layers.push(LayerSpec::conv(down_filters, pooled_geometry(k, from, to)?));
            layers.push(LayerSpec::Pool { size: 2 });
        } else {
            layers.push(LayerSpec::conv(
                down_filters,
                down_geometry(k, 2, from, to)?,
            ));
        }
        norm_act(&mut layers, bn, LRELU);
    }

    let declared = match variant {
        Variant::Cnn => {
            layers.push(LayerSpec::conv(1, ConvGeometry::new(k, 1, 0)));
            FeatureShape::Map { c: 1, h: 1, w: 1 }
        }
        Variant::FccganS | Variant::FccganP => {
            layers.push(LayerSpec::Flatten);
            for n in fc_schedule([512, 64, 16], cfg.fc_layers_d, 512) {
                layers.push(LayerSpec::fc(n));
                layers.push(LayerSpec::Act(LRELU));
            }
            layers.push(LayerSpec::fc(1));
            FeatureShape::Flat(1)
        }
    };
    if cfg.objective == Objective::Standard {
        layers.push(LayerSpec::Act(Activation::Sigmoid));
    }
    ModelSpec::with_output(cfg.dataset.image_shape(), layers, declared)
}

/// Both networks for one configuration, including the 7-convolution and
/// fully connected depth ablations.
pub fn build_ablation(cfg: &ArchitectureConfig) -> Result<(ModelSpec, ModelSpec)> {
    Ok((build_generator(cfg)?, build_discriminator(cfg)?))
}
