use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureShape, LayerSpec, ModelSpec};
use crate::autograd::{BatchNormState, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the zero-mean Gaussian used for every weight.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Stateless,
    Weighted {
        weight: usize,
        bias: usize,
    },
    Norm {
        gamma: usize,
        beta: usize,
        state: usize,
    },
}

/// A [`ModelSpec`] together with its parameters and batch-norm moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    prefix: String,
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
    bn_layers: Vec<usize>,
    slots: Vec<Slot>,
}

/// Fresh parameters for `spec`: N(0, [`INIT_STD`]²) weights, zero biases,
/// unit gamma and zero beta. Deterministic in `seed`.
pub fn init_parameters<T: Real>(spec: &ModelSpec, prefix: &str, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut net = Network {
        prefix: prefix.to_string(),
        spec: spec.clone(),
        params: Vec::new(),
        names: Vec::new(),
        bn: Vec::new(),
        bn_layers: Vec::new(),
        slots: Vec::with_capacity(spec.layers().len()),
    };
    let mut input = spec.input();
    for (i, layer) in spec.layers().iter().enumerate() {
        let in_ch = match input {
            FeatureShape::Flat(d) => d,
            FeatureShape::Map { c, .. } => c,
        };
        let mut gaussian = |shape: Vec<usize>| {
            let len = shape.iter().product();
            let data = (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("consistent shape")
        };
        let slot = match *layer {
            LayerSpec::Conv { filters, geom } => {
                let w = gaussian(vec![filters, in_ch, geom.kernel, geom.kernel]);
                net.weighted(i, w, filters)
            }
            LayerSpec::ConvT { filters, geom } => {
                let w = gaussian(vec![in_ch, filters, geom.kernel, geom.kernel]);
                net.weighted(i, w, filters)
            }
            LayerSpec::Fc { nodes } => {
                let w = gaussian(vec![in_ch, nodes]);
                net.weighted(i, w, nodes)
            }
            LayerSpec::BatchNorm => {
                let gamma = net.push(i, "gamma", Tensor::full([in_ch], T::one()));
                let beta = net.push(i, "beta", Tensor::zeros([in_ch]));
                net.bn.push(BatchNormState::new(in_ch, T::lit(BN_MOMENTUM)));
                net.bn_layers.push(i);
                Slot::Norm {
                    gamma,
                    beta,
                    state: net.bn.len() - 1,
                }
            }
            _ => Slot::Stateless,
        };
        net.slots.push(slot);
        input = spec.shapes()[i];
    }
    net
}

impl<T: Real> Network<T> {
    fn push(&mut self, layer: usize, role: &str, value: Tensor<T>) -> usize {
        self.names.push(format!("{}.{layer}.{role}", self.prefix));
        self.params.push(value);
        self.params.len() - 1
    }

    fn weighted(&mut self, layer: usize, weight: Tensor<T>, outputs: usize) -> Slot {
        let weight = self.push(layer, "weight", weight);
        let bias = self.push(layer, "bias", Tensor::zeros([outputs]));
        Slot::Weighted { weight, bias }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Trainable tensors in layer order.
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Names aligned with [`Network::params`], e.g. `g.3.weight`.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    /// Every stored tensor by name: parameters, then running moments.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (state, &layer) in self.bn.iter().zip(&self.bn_layers) {
            let c = state.running_mean.len();
            for (role, v) in [
                ("running_mean", &state.running_mean),
                ("running_var", &state.running_var),
            ] {
                let t = Tensor::new([c], v.clone()).expect("channel vector");
                out.push((format!("{}.{layer}.{role}", self.prefix), t));
            }
        }
        out
    }

    /// Replaces every stored tensor with the one `lookup` returns for its name.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let current = self.named_tensors();
        let mut loaded = Vec::with_capacity(current.len());
        for (name, old) in &current {
            let t =
                lookup(name).ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != old.shape() {
                return Err(Error::shape(
                    "load",
                    format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        old.shape()
                    ),
                ));
            }
            loaded.push(t);
        }
        let mut it = loaded.into_iter();
        for p in self.params.iter_mut() {
            *p = it.next().expect("counted");
        }
        for state in self.bn.iter_mut() {
            state.running_mean = it.next().expect("counted").into_data();
            state.running_var = it.next().expect("counted").into_data();
        }
        Ok(())
    }

    /// Records the parameters on `tape`; `track` decides whether they
    /// receive gradients.
    pub fn push_params(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), track))
            .collect()
    }

    /// Runs the stack on `input` (`[N, ...input shape]`), returning the
    /// output of every layer. `params` comes from [`Network::push_params`].
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} parameter handles for {} parameters",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        let shape = tape.value(input).shape().to_vec();
        let n = shape[0];
        if shape != self.spec.input().batched(n) {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} expects input {}, got {shape:?}",
                    self.prefix,
                    self.spec.input()
                ),
            ));
        }
        let eps = T::lit(BN_EPS);
        let mut outputs = Vec::with_capacity(self.slots.len());
        let mut h = input;
        for (i, layer) in self.spec.layers().iter().enumerate() {
            h = match (*layer, self.slots[i]) {
                (LayerSpec::Conv { geom, .. }, Slot::Weighted { weight, bias }) => {
                    tape.conv2d(h, params[weight], params[bias], geom)?
                }
                (LayerSpec::ConvT { geom, .. }, Slot::Weighted { weight, bias }) => {
                    tape.conv_transpose2d(h, params[weight], params[bias], geom)?
                }
                (LayerSpec::Fc { .. }, Slot::Weighted { weight, bias }) => {
                    tape.affine(h, params[weight], params[bias])?
                }
                (LayerSpec::BatchNorm, Slot::Norm { gamma, beta, state }) => tape.batch_norm(
                    h,
                    params[gamma],
                    params[beta],
                    &mut self.bn[state],
                    mode,
                    eps,
                )?,
                (LayerSpec::Act(kind), _) => tape.activation(h, kind)?,
                (LayerSpec::Pool { size }, _) => tape.avg_pool2d(h, size)?,
                (LayerSpec::Reshape { .. } | LayerSpec::Flatten, _) => {
                    let target = self.spec.shapes()[i].batched(n);
                    tape.reshape(h, &target)?
                }
                (layer, slot) => unreachable!("layer {layer} paired with {slot:?}"),
            };
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Inference with running batch-norm moments and no gradient tracking.
    pub fn infer(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.push_params(&mut tape, false);
        let x = tape.constant(input);
        let outs = self.forward(&mut tape, &params, x, BnMode::Eval)?;
        Ok(tape.value(*outs.last().unwrap_or(&x)).clone())
    }

    /// Gradients of the tracked parameters after a backward pass; untouched
    /// parameters get zeros.
    pub fn gradients(&self, tape: &Tape<T>, params: &[Var]) -> Vec<Tensor<T>> {
        params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect()
    }
}
