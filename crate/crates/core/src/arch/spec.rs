//! Declarative layer stacks and their shape propagation.

use std::fmt;

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

/// Per-sample feature shape: a flat vector or a `C×H×W` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureShape {
    Flat(usize),
    Map { c: usize, h: usize, w: usize },
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Flat(n) => n,
            FeatureShape::Map { c, h, w } => c * h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batched tensor shape in NCHW (or N×D) order.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            FeatureShape::Flat(d) => vec![n, d],
            FeatureShape::Map { c, h, w } => vec![n, c, h, w],
        }
    }

    /// Inverse of [`FeatureShape::batched`] for the trailing axes.
    pub fn from_dims(dims: &[usize]) -> Option<FeatureShape> {
        match *dims {
            [d] => Some(FeatureShape::Flat(d)),
            [c, h, w] => Some(FeatureShape::Map { c, h, w }),
            _ => None,
        }
    }
}

/// Printed as `(H,W,C)` for maps, matching image-shape notation.
impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FeatureShape::Flat(n) => write!(f, "({n})"),
            FeatureShape::Map { c, h, w } => write!(f, "({h},{w},{c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv { filters: usize, geom: ConvGeometry },
    ConvT { filters: usize, geom: ConvGeometry },
    Fc { nodes: usize },
    BatchNorm,
    Reshape { c: usize, h: usize, w: usize },
    Flatten,
    Pool { size: usize },
    Act(Activation),
}

impl LayerSpec {
    pub fn conv(filters: usize, geom: ConvGeometry) -> Self {
        LayerSpec::Conv { filters, geom }
    }

    pub fn conv_t(filters: usize, geom: ConvGeometry) -> Self {
        LayerSpec::ConvT { filters, geom }
    }

    pub fn fc(nodes: usize) -> Self {
        LayerSpec::Fc { nodes }
    }

    pub fn reshape(h: usize, w: usize, c: usize) -> Self {
        LayerSpec::Reshape { c, h, w }
    }

    /// Output shape for one sample, or a reason the layer cannot accept `input`.
    pub fn propagate(&self, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
        use FeatureShape::*;
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(format!("{what} must be positive"))
            } else {
                Ok(())
            }
        };
        match (*self, input) {
            (LayerSpec::Conv { filters, geom }, Map { h, w, .. }) => {
                positive("filters", filters)?;
                let oh = geom.conv_output(h).map_err(|e| e.to_string())?;
                let ow = geom.conv_output(w).map_err(|e| e.to_string())?;
                Ok(Map {
                    c: filters,
                    h: oh,
                    w: ow,
                })
            }
            (LayerSpec::ConvT { filters, geom }, Map { h, w, .. }) => {
                positive("filters", filters)?;
                let oh = geom.transpose_output(h).map_err(|e| e.to_string())?;
                let ow = geom.transpose_output(w).map_err(|e| e.to_string())?;
                Ok(Map {
                    c: filters,
                    h: oh,
                    w: ow,
                })
            }
            (LayerSpec::Conv { .. } | LayerSpec::ConvT { .. }, Flat(_)) => {
                Err("convolution needs a spatial input; reshape first".into())
            }
            (LayerSpec::Fc { nodes }, Flat(_)) => {
                positive("nodes", nodes)?;
                Ok(Flat(nodes))
            }
            (LayerSpec::Fc { .. }, Map { .. }) => {
                Err("fully connected layer needs a flat input; flatten first".into())
            }
            (LayerSpec::BatchNorm | LayerSpec::Act(_), s) => {
                if let LayerSpec::Act(a) = self {
                    a.validate().map_err(|e| e.to_string())?;
                }
                Ok(s)
            }
            (LayerSpec::Reshape { c, h, w }, s) => {
                let target = Map { c, h, w };
                if target.len() != s.len() {
                    return Err(format!(
                        "reshape to {target} needs {} elements, input {s} has {}",
                        target.len(),
                        s.len()
                    ));
                }
                Ok(target)
            }
            (LayerSpec::Flatten, s) => Ok(Flat(s.len())),
            (LayerSpec::Pool { size }, Map { c, h, w }) => {
                positive("pool size", size)?;
                if h % size != 0 || w % size != 0 {
                    return Err(format!("{h}x{w} map is not divisible by pool {size}"));
                }
                Ok(Map {
                    c,
                    h: h / size,
                    w: w / size,
                })
            }
            (LayerSpec::Pool { .. }, Flat(_)) => Err("pooling needs a spatial input".into()),
        }
    }

    /// Whether this layer opens a new line in the text form.
    fn starts_line(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. }
                | LayerSpec::ConvT { .. }
                | LayerSpec::Fc { .. }
                | LayerSpec::Reshape { .. }
                | LayerSpec::Flatten
        )
    }
}

fn fmt_pad(f: &mut fmt::Formatter<'_>, g: &ConvGeometry) -> fmt::Result {
    if g.pad_extra == 0 {
        write!(f, ",p={}", g.pad)?;
    } else {
        write!(f, ",p={}:{}", g.pad, g.pad + g.pad_extra)?;
    }
    if g.output_pad != 0 {
        write!(f, ",op={}", g.output_pad)?;
    }
    Ok(())
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { filters, geom } => {
                write!(f, "CONV({filters},{},{}", geom.kernel, geom.stride)?;
                fmt_pad(f, geom)?;
                f.write_str(")")
            }
            LayerSpec::ConvT { filters, geom } => {
                write!(f, "CONVT({filters},{},{}", geom.kernel, geom.stride)?;
                fmt_pad(f, geom)?;
                f.write_str(")")
            }
            LayerSpec::Fc { nodes } => write!(f, "FC({nodes})"),
            LayerSpec::BatchNorm => f.write_str("BN"),
            LayerSpec::Reshape { c, h, w } => write!(f, "RESHAPE({h},{w},{c})"),
            LayerSpec::Flatten => f.write_str("FLATTEN"),
            LayerSpec::Pool { size } => write!(f, "POOL({size})"),
            LayerSpec::Act(a) => write!(f, "{a}"),
        }
    }
}

/// An ordered layer stack with validated shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input: FeatureShape,
    layers: Vec<LayerSpec>,
    shapes: Vec<FeatureShape>,
}

impl ModelSpec {
    pub fn new(input: FeatureShape, layers: Vec<LayerSpec>) -> Result<ModelSpec> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            cur = layer.propagate(cur).map_err(|reason| Error::Build {
                layer: i,
                layer_desc: layer.to_string(),
                reason,
            })?;
            shapes.push(cur);
        }
        Ok(ModelSpec {
            input,
            layers,
            shapes,
        })
    }

    /// Like [`ModelSpec::new`] but also checks the final shape.
    pub fn with_output(
        input: FeatureShape,
        layers: Vec<LayerSpec>,
        declared: FeatureShape,
    ) -> Result<ModelSpec> {
        let spec = ModelSpec::new(input, layers)?;
        if spec.output() != declared {
            let last = spec.layers.len().saturating_sub(1);
            return Err(Error::Build {
                layer: last,
                layer_desc: spec
                    .layers
                    .get(last)
                    .map(|l| l.to_string())
                    .unwrap_or_default(),
                reason: format!(
                    "stack ends at {} but {declared} was declared",
                    spec.output()
                ),
            });
        }
        Ok(spec)
    }

    pub fn input(&self) -> FeatureShape {
        self.input
    }

    pub fn output(&self) -> FeatureShape {
        self.shapes.last().copied().unwrap_or(self.input)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape after each layer.
    pub fn shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn count_layers(&self, pred: impl Fn(&LayerSpec) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }

    /// Grouped lines of the text form, each with the shape it ends at.
    pub fn lines(&self) -> Vec<(String, FeatureShape)> {
        let mut out: Vec<(String, FeatureShape)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match out.last_mut() {
                Some((text, shape)) if !layer.starts_line() => {
                    text.push(' ');
                    text.push_str(&layer.to_string());
                    *shape = self.shapes[i];
                }
                _ => out.push((layer.to_string(), self.shapes[i])),
            }
        }
        out
    }
}

/// One line per layer group: `INPUT -> (32,32,3)`, then e.g.
/// `CONV(64,4,2,p=1) BN LRELU(0.2) -> (16,16,64)`.
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "INPUT -> {}", self.input)?;
        for (text, shape) in self.lines() {
            writeln!(f, "{text} -> {shape}")?;
        }
        Ok(())
    }
}
