//! Alternating adversarial training, checkpoints and loss logs.

mod checkpoint;
mod config;
mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{build_ablation, init_parameters, FeatureShape, Network};
use crate::autograd::{BnMode, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::{d_loss, g_loss, Objective};
use crate::optim::{clip_weights, Optimizer};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, Progress};
pub(crate) use config::{derive_seed, SeedTag};
pub use config::{parse_pairs, TrainConfig, CONFIG_KEYS};
pub use log::{LossLog, LossRow, LOSS_LOG_HEADER};

/// Images generated per forward pass when sampling.
const SAMPLE_CHUNK: usize = 250;

/// Notifications delivered to the hook passed to [`Trainer::run`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// A discriminator update (one of `n_critic` under the Wasserstein loss)
    /// has just been applied.
    CriticUpdate {
        iteration: u64,
        step: usize,
    },
    Iteration(LossRow),
    /// `eval_every` iterations have elapsed since the last evaluation point.
    EvalPoint {
        iteration: u64,
    },
    EpochEnd {
        epoch: usize,
    },
}

/// Owns every piece of mutable training state.
pub struct Trainer {
    config: TrainConfig,
    generator: Network<f32>,
    discriminator: Network<f32>,
    opt_g: Optimizer<f32>,
    opt_d: Optimizer<f32>,
    noise: ChaCha8Rng,
    progress: Progress,
    clock: Instant,
    order: Option<(usize, Vec<usize>)>,
}

fn last(outputs: Vec<Var>) -> Var {
    *outputs.last().expect("networks have at least one layer")
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    f64::from(tape.value(v).data()[0])
}

fn noise_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<f32> {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new([n, dim], data).expect("positive sizes")
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let (g_spec, d_spec) = build_ablation(&config.arch)?;
        let generator = init_parameters(&g_spec, "g", config.generator_seed());
        let discriminator = init_parameters(&d_spec, "d", config.discriminator_seed());
        let opt_g = Optimizer::new(config.optimizer, generator.params())?;
        let opt_d = Optimizer::new(config.optimizer, discriminator.params())?;
        let noise = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedTag::Noise));
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            noise,
            progress: Progress::default(),
            clock: Instant::now(),
            order: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let config = ckpt.config().clone();
        let generator = ckpt.generator()?;
        let discriminator = ckpt.discriminator()?;
        let opt_g = ckpt.optimizer("opt_g", &generator)?;
        let opt_d = ckpt.optimizer("opt_d", &discriminator)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            noise: ckpt.noise_rng()?,
            progress: ckpt.progress()?,
            clock: Instant::now(),
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Network<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Network<f32> {
        &self.discriminator
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(checkpoint::Parts {
            config: &self.config,
            generator: &self.generator,
            discriminator: &self.discriminator,
            opt_g: &self.opt_g,
            opt_d: &self.opt_d,
            noise: &self.noise,
            progress: self.progress,
        })
    }

    /// Training samples in use and generator iterations per epoch.
    pub fn epoch_geometry(&self, data: &Dataset) -> Result<(usize, usize)> {
        let n = self.config.limit.map_or(data.len(), |l| l.min(data.len()));
        let group = self.config.batch_size * self.config.batches_per_iteration();
        let per_epoch = n / group;
        if per_epoch == 0 {
            return Err(Error::Config(format!(
                "{n} training samples cannot fill one iteration of {group} samples"
            )));
        }
        Ok((n, per_epoch))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let image = FeatureShape::from_dims(&data.images().shape()[1..]);
        let expected = self.discriminator.spec().input();
        if data.kind() != self.config.arch.dataset || image != Some(expected) {
            return Err(Error::Config(format!(
                "dataset {} with images {:?} does not match the {} architecture input {expected}",
                data.kind(),
                &data.images().shape()[1..],
                self.config.arch.dataset
            )));
        }
        Ok(())
    }

    fn epoch_order(&mut self, n: usize) -> &[usize] {
        let epoch = self.progress.epoch;
        if self
            .order
            .as_ref()
            .is_none_or(|(e, o)| *e != epoch || o.len() != n)
        {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SeedTag::Shuffle));
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just filled").1
    }

    /// Trains until all epochs are done or `budget` iterations have run in
    /// this call. On a non-finite loss the state is left as it was before
    /// the failing update, so [`Trainer::checkpoint`] yields a diagnostic
    /// snapshot.
    pub fn run(
        &mut self,
        data: &Dataset,
        budget: Option<u64>,
        log: &mut LossLog,
        mut hook: impl FnMut(&Trainer, Event) -> Result<()>,
    ) -> Result<()> {
        self.check_data(data)?;
        let (n, per_epoch) = self.epoch_geometry(data)?;
        let group = self.config.batch_size * self.config.batches_per_iteration();
        let mut done = 0u64;
        while !self.is_finished() && budget.is_none_or(|b| done < b) {
            let start = self.progress.cursor * group;
            let indices = self.epoch_order(n)[start..start + group].to_vec();
            let (d, g) = self.iteration(data, &indices, &mut hook)?;
            done += 1;
            self.progress.iteration += 1;
            self.progress.cursor += 1;
            let row = LossRow {
                iter: self.progress.iteration,
                epoch: self.progress.epoch + 1,
                d_loss: d,
                g_loss: g,
                wall_ms: if self.config.deterministic {
                    0
                } else {
                    self.clock.elapsed().as_millis() as u64
                },
            };
            log.push(row);
            hook(self, Event::Iteration(row))?;
            if self.progress.cursor == per_epoch {
                self.progress.epoch += 1;
                self.progress.cursor = 0;
            }
            let every = self.config.eval_every;
            if every > 0 && self.progress.iteration.is_multiple_of(every) {
                hook(
                    self,
                    Event::EvalPoint {
                        iteration: self.progress.iteration,
                    },
                )?;
            }
            if self.progress.cursor == 0 {
                hook(
                    self,
                    Event::EpochEnd {
                        epoch: self.progress.epoch,
                    },
                )?;
            }
        }
        Ok(())
    }

    fn iteration(
        &mut self,
        data: &Dataset,
        indices: &[usize],
        hook: &mut impl FnMut(&Trainer, Event) -> Result<()>,
    ) -> Result<(f64, f64)> {
        let b = self.config.batch_size;
        let steps = self.config.batches_per_iteration();
        let mut d_total = 0.0;
        for (step, chunk) in indices.chunks_exact(b).enumerate() {
            d_total += self.discriminator_step(data.batch::<f32>(chunk)?)?;
            let iteration = self.progress.iteration + 1;
            hook(self, Event::CriticUpdate { iteration, step })?;
        }
        let g = self.generator_step()?;
        Ok((d_total / steps as f64, g))
    }

    fn non_finite(&self, which: &str, value: f64) -> Error {
        Error::Numerical(format!(
            "non-finite {which} loss {value} at iteration {}",
            self.progress.iteration + 1
        ))
    }

    /// Network outputs are checked before the loss, which would otherwise
    /// report NaN probabilities as a domain error.
    fn check_outputs(&self, tape: &Tape<f32>, outputs: &[Var]) -> Result<()> {
        for &v in outputs {
            if let Some(x) = tape.value(v).data().iter().find(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite discriminator output {x} at iteration {}",
                    self.progress.iteration + 1
                )));
            }
        }
        Ok(())
    }

    fn discriminator_step(&mut self, real: Tensor<f32>) -> Result<f64> {
        let objective = self.config.arch.objective;
        let mut tape = Tape::new();
        let gp = self.generator.push_params(&mut tape, false);
        let dp = self.discriminator.push_params(&mut tape, true);
        let z = noise_batch(&mut self.noise, real.shape()[0], self.config.arch.noise_dim);
        let z = tape.constant(z);
        let fake = last(
            self.generator
                .forward(&mut tape, &gp, z, BnMode::TrainFrozen)?,
        );
        let x = tape.constant(real);
        let real_out = last(
            self.discriminator
                .forward(&mut tape, &dp, x, BnMode::Train)?,
        );
        let fake_out = last(
            self.discriminator
                .forward(&mut tape, &dp, fake, BnMode::Train)?,
        );
        self.check_outputs(&tape, &[real_out, fake_out])?;
        let loss = d_loss(&mut tape, objective, real_out, fake_out)?;
        let value = scalar(&tape, loss);
        if !value.is_finite() {
            return Err(self.non_finite("discriminator", value));
        }
        tape.backward(loss)?;
        let grads = self.discriminator.gradients(&tape, &dp);
        self.opt_d.step(self.discriminator.params_mut(), &grads)?;
        if objective == Objective::Wgan {
            clip_weights(self.discriminator.params_mut(), self.config.clip_c)?;
        }
        Ok(value)
    }

    fn generator_step(&mut self) -> Result<f64> {
        let mut tape = Tape::new();
        let gp = self.generator.push_params(&mut tape, true);
        let dp = self.discriminator.push_params(&mut tape, false);
        let z = noise_batch(
            &mut self.noise,
            self.config.batch_size,
            self.config.arch.noise_dim,
        );
        let z = tape.constant(z);
        let fake = last(self.generator.forward(&mut tape, &gp, z, BnMode::Train)?);
        let out = last(
            self.discriminator
                .forward(&mut tape, &dp, fake, BnMode::TrainFrozen)?,
        );
        self.check_outputs(&tape, &[out])?;
        let loss = g_loss(
            &mut tape,
            self.config.arch.objective,
            self.config.generator_loss,
            out,
        )?;
        let value = scalar(&tape, loss);
        if !value.is_finite() {
            return Err(self.non_finite("generator", value));
        }
        tape.backward(loss)?;
        let grads = self.generator.gradients(&tape, &gp);
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        Ok(value)
    }
}

/// Trains `cfg` from scratch on `data` until all epochs are done.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<(Checkpoint, LossLog)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = LossLog::new();
    trainer.run(data, None, &mut log, |_, _| Ok(()))?;
    Ok((trainer.checkpoint(), log))
}

/// `n` images from `generator` in inference mode, driven by `seed`.
pub fn generate(generator: &mut Network<f32>, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let dim = generator.spec().input().len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Sample));
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut left = n;
    while left > 0 {
        let m = left.min(SAMPLE_CHUNK);
        let out = generator.infer(noise_batch(&mut rng, m, dim))?;
        shape = out.shape().to_vec();
        data.extend_from_slice(out.data());
        left -= m;
    }
    if n == 0 {
        return Err(Error::Config("cannot sample zero images".into()));
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Samples `n` images from the generator stored in `ckpt`.
pub fn sample(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut g = ckpt.generator()?;
    generate(&mut g, n, seed)
}
