use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::arch::{ArchitectureConfig, DatasetKind, Variant};
use crate::error::{Error, Result};
use crate::objectives::{GeneratorLoss, Objective};
use crate::optim::{OptimizerConfig, OptimizerKind};

/// Every key accepted by [`TrainConfig::from_pairs`], in canonical order.
pub const CONFIG_KEYS: [&str; 26] = [
    "batch_size",
    "bn_d",
    "bn_g",
    "clip_c",
    "conv_depth_d",
    "conv_depth_g",
    "dataset",
    "decay",
    "deterministic",
    "epochs",
    "eval_every",
    "fc_layers_d",
    "fc_layers_g",
    "generator_loss",
    "grid_cols",
    "grid_rows",
    "limit",
    "lr",
    "n_critic",
    "noise_dim",
    "objective",
    "optimizer",
    "seed",
    "variant",
    "variant_d",
    "variant_g",
];

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchitectureConfig,
    pub optimizer: OptimizerConfig,
    pub generator_loss: GeneratorLoss,
    pub batch_size: usize,
    pub epochs: usize,
    /// Critic updates per generator update under the Wasserstein objective.
    pub n_critic: usize,
    pub clip_c: f64,
    pub seed: u64,
    /// Emit an evaluation point every this many iterations; 0 means only at
    /// epoch ends.
    pub eval_every: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Use only the first `limit` training samples.
    pub limit: Option<usize>,
    /// Record zero wall time so logs are bit-identical across runs.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Objective-dependent defaults: Adam 1e-4 with decay 1e-5 and batch 32
    /// for the standard loss, RMSProp 5e-5 and batch 64 for the Wasserstein
    /// loss.
    pub fn new(arch: ArchitectureConfig) -> Self {
        let (optimizer, batch_size) = match arch.objective {
            Objective::Standard => (
                OptimizerConfig::new(OptimizerKind::Adam, 1e-4).with_decay(1e-5),
                32,
            ),
            Objective::Wgan => (OptimizerConfig::new(OptimizerKind::RmsProp, 5e-5), 64),
        };
        TrainConfig {
            arch,
            optimizer,
            generator_loss: GeneratorLoss::default(),
            batch_size,
            epochs: 1,
            n_critic: 5,
            clip_c: 0.01,
            seed: 0,
            eval_every: 0,
            grid_rows: 8,
            grid_cols: 8,
            limit: None,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if self.n_critic == 0 {
            return Err(Error::Config("n_critic must be positive".into()));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::Config(format!(
                "clip_c must be positive, got {}",
                self.clip_c
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config(
                "sample grid needs at least one row and column".into(),
            ));
        }
        if self.limit == Some(0) {
            return Err(Error::Config("limit must be positive".into()));
        }
        Ok(())
    }

    /// Real batches consumed per generator iteration.
    pub fn batches_per_iteration(&self) -> usize {
        match self.arch.objective {
            Objective::Standard => 1,
            Objective::Wgan => self.n_critic,
        }
    }

    pub fn generator_seed(&self) -> u64 {
        derive_seed(self.seed, SeedTag::Generator)
    }

    pub fn discriminator_seed(&self) -> u64 {
        derive_seed(self.seed, SeedTag::Discriminator)
    }

    /// Builds a config from key/value pairs. The objective is applied first
    /// so its defaults can be overridden by the remaining keys.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<TrainConfig> {
        if let Some(unknown) = pairs.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{unknown}`")));
        }
        let get = |k: &str| pairs.get(k).map(|v| v.trim());
        let dataset: DatasetKind = get("dataset")
            .map(str::parse)
            .transpose()?
            .unwrap_or(DatasetKind::Mnist);
        let variant: Variant = get("variant")
            .map(str::parse)
            .transpose()?
            .unwrap_or(Variant::Cnn);
        let objective: Objective = get("objective")
            .map(str::parse)
            .transpose()?
            .unwrap_or(Objective::Standard);
        let mut cfg =
            TrainConfig::new(ArchitectureConfig::new(dataset, variant).with_objective(objective));

        for (key, raw) in pairs {
            let v = raw.trim();
            let a = &mut cfg.arch;
            match key.as_str() {
                "dataset" | "variant" | "objective" => {}
                "variant_g" => a.variant_g = Some(value(key, v)?),
                "variant_d" => a.variant_d = Some(value(key, v)?),
                "fc_layers_g" => a.fc_layers_g = value(key, v)?,
                "fc_layers_d" => a.fc_layers_d = value(key, v)?,
                "conv_depth_g" => a.conv_depth_g = value(key, v)?,
                "conv_depth_d" => a.conv_depth_d = value(key, v)?,
                "bn_g" => a.bn_generator = value(key, v)?,
                "bn_d" => a.bn_discriminator = value(key, v)?,
                "noise_dim" => a.noise_dim = value(key, v)?,
                "optimizer" => cfg.optimizer.kind = value(key, v)?,
                "lr" => cfg.optimizer.lr = value(key, v)?,
                "decay" => cfg.optimizer.decay = value(key, v)?,
                "generator_loss" => cfg.generator_loss = value(key, v)?,
                "batch_size" => cfg.batch_size = value(key, v)?,
                "epochs" => cfg.epochs = value(key, v)?,
                "n_critic" => cfg.n_critic = value(key, v)?,
                "clip_c" => cfg.clip_c = value(key, v)?,
                "seed" => cfg.seed = value(key, v)?,
                "eval_every" => cfg.eval_every = value(key, v)?,
                "grid_rows" => cfg.grid_rows = value(key, v)?,
                "grid_cols" => cfg.grid_cols = value(key, v)?,
                "limit" => {
                    cfg.limit = if v == "none" {
                        None
                    } else {
                        Some(value(key, v)?)
                    }
                }
                "deterministic" => cfg.deterministic = value(key, v)?,
                _ => unreachable!("checked against CONFIG_KEYS"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The canonical pairs; optional keys are omitted when unset.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let a = &self.arch;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("batch_size", self.batch_size.to_string());
        put("bn_d", a.bn_discriminator.to_string());
        put("bn_g", a.bn_generator.to_string());
        put("clip_c", self.clip_c.to_string());
        put("conv_depth_d", a.conv_depth_d.to_string());
        put("conv_depth_g", a.conv_depth_g.to_string());
        put("dataset", a.dataset.to_string());
        put("decay", self.optimizer.decay.to_string());
        put("deterministic", self.deterministic.to_string());
        put("epochs", self.epochs.to_string());
        put("eval_every", self.eval_every.to_string());
        put("fc_layers_d", a.fc_layers_d.to_string());
        put("fc_layers_g", a.fc_layers_g.to_string());
        put("generator_loss", self.generator_loss.to_string());
        put("grid_cols", self.grid_cols.to_string());
        put("grid_rows", self.grid_rows.to_string());
        put(
            "limit",
            self.limit
                .map_or_else(|| "none".to_string(), |n| n.to_string()),
        );
        put("lr", self.optimizer.lr.to_string());
        put("n_critic", self.n_critic.to_string());
        put("noise_dim", a.noise_dim.to_string());
        put("objective", a.objective.to_string());
        put("optimizer", self.optimizer.kind.name().to_string());
        put("seed", self.seed.to_string());
        put("variant", a.variant.to_string());
        if let Some(v) = a.variant_d {
            put("variant_d", v.to_string());
        }
        if let Some(v) = a.variant_g {
            put("variant_g", v.to_string());
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        TrainConfig::from_pairs(&parse_pairs(text)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
        })?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("invalid value `{raw}` for `{key}`: {e}")))
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum SeedTag {
    Generator = 1,
    Discriminator = 2,
    Noise = 3,
    Shuffle = 4,
    Sample = 5,
    Classifier = 6,
}

/// Decorrelates sub-seeds of one user seed (SplitMix64 finalizer).
pub(crate) fn derive_seed(seed: u64, tag: SeedTag) -> u64 {
    let mut z = seed ^ (tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
