use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::arch::{build_ablation, init_parameters, Network};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

const COUNTERS: &str = "trainer.counters";
const NOISE_RNG: &str = "trainer.noise_rng";

/// A complete, resumable snapshot of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: TrainConfig,
    archive: Archive,
}

/// Position of a run: iterations done, epochs completed and batches consumed
/// inside the current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub iteration: u64,
    pub epoch: usize,
    pub cursor: usize,
}

pub(crate) struct Parts<'a> {
    pub config: &'a TrainConfig,
    pub generator: &'a Network<f32>,
    pub discriminator: &'a Network<f32>,
    pub opt_g: &'a Optimizer<f32>,
    pub opt_d: &'a Optimizer<f32>,
    pub noise: &'a ChaCha8Rng,
    pub progress: Progress,
}

fn bytes_tensor(bytes: Vec<u8>) -> Tensor<u8> {
    Tensor::new([bytes.len()], bytes).expect("non-empty")
}

fn u64_at(bytes: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap())
}

fn push_optimizer(archive: &mut Archive, tag: &str, opt: &Optimizer<f32>, names: &[String]) {
    archive.push(
        format!("{tag}.step"),
        bytes_tensor(opt.steps().to_le_bytes().to_vec()),
    );
    for (s, slot) in opt.slots().iter().enumerate() {
        for (name, t) in names.iter().zip(slot) {
            archive.push(format!("{tag}.slot{s}.{name}"), t.clone());
        }
    }
}

impl Checkpoint {
    pub(crate) fn capture(p: Parts<'_>) -> Checkpoint {
        let mut archive = Archive::new(p.config.to_text());
        for net in [p.generator, p.discriminator] {
            for (name, t) in net.named_tensors() {
                archive.push(name, t);
            }
        }
        push_optimizer(&mut archive, "opt_g", p.opt_g, p.generator.param_names());
        push_optimizer(
            &mut archive,
            "opt_d",
            p.opt_d,
            p.discriminator.param_names(),
        );
        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&p.noise.get_seed());
        rng.extend_from_slice(&p.noise.get_stream().to_le_bytes());
        rng.extend_from_slice(&p.noise.get_word_pos().to_le_bytes());
        archive.push(NOISE_RNG, bytes_tensor(rng));
        let mut counters = Vec::with_capacity(24);
        for v in [
            p.progress.iteration,
            p.progress.epoch as u64,
            p.progress.cursor as u64,
        ] {
            counters.extend_from_slice(&v.to_le_bytes());
        }
        archive.push(COUNTERS, bytes_tensor(counters));
        Checkpoint {
            config: p.config.clone(),
            archive,
        }
    }

    pub fn from_archive(archive: Archive) -> Result<Checkpoint> {
        let config = TrainConfig::from_text(&archive.config)?;
        let ckpt = Checkpoint { config, archive };
        ckpt.progress()?;
        ckpt.noise_rng()?;
        Ok(ckpt)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn progress(&self) -> Result<Progress> {
        let c = self.archive.tensor::<u8>(COUNTERS)?;
        if c.len() != 24 {
            return Err(Error::Config(format!(
                "`{COUNTERS}` must hold 24 bytes, found {}",
                c.len()
            )));
        }
        let b = c.data();
        Ok(Progress {
            iteration: u64_at(b, 0),
            epoch: u64_at(b, 1) as usize,
            cursor: u64_at(b, 2) as usize,
        })
    }

    pub(crate) fn noise_rng(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let t = self.archive.tensor::<u8>(NOISE_RNG)?;
        let b = t.data();
        if b.len() != 56 {
            return Err(Error::Config(format!(
                "`{NOISE_RNG}` must hold 56 bytes, found {}",
                b.len()
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
        rng.set_stream(u64_at(&b[32..40], 0));
        rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
        Ok(rng)
    }

    fn network(&self, generator: bool) -> Result<Network<f32>> {
        let (g_spec, d_spec) = build_ablation(&self.config.arch)?;
        let (spec, prefix) = if generator {
            (g_spec, "g")
        } else {
            (d_spec, "d")
        };
        let mut net = init_parameters(&spec, prefix, 0);
        net.load_named(|name| self.archive.tensor::<f32>(name).ok())?;
        Ok(net)
    }

    pub fn generator(&self) -> Result<Network<f32>> {
        self.network(true)
    }

    pub fn discriminator(&self) -> Result<Network<f32>> {
        self.network(false)
    }

    pub(crate) fn optimizer(&self, tag: &str, net: &Network<f32>) -> Result<Optimizer<f32>> {
        let config = self.config.optimizer;
        let step = self.archive.tensor::<u8>(&format!("{tag}.step"))?;
        if step.len() != 8 {
            return Err(Error::Config(format!("`{tag}.step` must hold 8 bytes")));
        }
        let slots = (0..config.kind.slot_count())
            .map(|s| {
                net.param_names()
                    .iter()
                    .map(|name| self.archive.tensor::<f32>(&format!("{tag}.slot{s}.{name}")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Optimizer::from_parts(config, u64_at(step.data(), 0), slots)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.archive.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        Checkpoint::from_archive(Archive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_archive(Archive::load(path)?)
    }
}
