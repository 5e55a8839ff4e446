use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use fccgan::train::{parse_pairs, CONFIG_KEYS};
use fccgan::{Error, Result, TrainConfig};

pub const ENV_PREFIX: &str = "FCCGAN_";

/// Experiment settings. Precedence: `--config` file, then `FCCGAN_<KEY>`
/// environment variables, then these flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value file, e.g. a run's config.txt
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// mnist, cifar10, svhn or celeba
    #[arg(long)]
    pub dataset: Option<String>,
    /// cnn, fccgan-s or fccgan-p
    #[arg(long)]
    pub variant: Option<String>,
    /// Generator variant, overriding --variant
    #[arg(long)]
    pub variant_g: Option<String>,
    /// Discriminator variant, overriding --variant
    #[arg(long)]
    pub variant_d: Option<String>,
    /// standard or wgan
    #[arg(long)]
    pub objective: Option<String>,
    /// non-saturating or minimax
    #[arg(long)]
    pub generator_loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the first N samples only
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// adam, rmsprop or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay: lr / (1 + decay * step)
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Critic updates per generator update (wgan)
    #[arg(long)]
    pub n_critic: Option<usize>,
    /// Critic weight clipping constant (wgan)
    #[arg(long = "clip")]
    pub clip_c: Option<f64>,
    /// Disable batch normalization in the generator
    #[arg(long)]
    pub no_bn_g: bool,
    /// Disable batch normalization in the discriminator
    #[arg(long)]
    pub no_bn_d: bool,
    /// Fully connected layers in both networks
    #[arg(long, value_name = "K")]
    pub fc_layers: Option<usize>,
    #[arg(long, value_name = "K")]
    pub fc_layers_g: Option<usize>,
    #[arg(long, value_name = "K")]
    pub fc_layers_d: Option<usize>,
    /// Convolution depth of both networks (4 or 7)
    #[arg(long)]
    pub conv_depth: Option<usize>,
    #[arg(long)]
    pub noise_dim: Option<usize>,
    /// Evaluate every N iterations in addition to epoch ends
    #[arg(long, value_name = "N")]
    pub eval_every: Option<u64>,
    /// Sample grid as ROWSxCOLS
    #[arg(long, value_name = "RxC")]
    pub grid: Option<String>,
    /// Record wall-clock time in the loss log (not reproducible)
    #[arg(long)]
    pub wall_clock: bool,
}

pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("grid `{s}` must look like 8x8"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

impl ConfigArgs {
    fn flag_pairs(&self) -> Result<Vec<(&'static str, String)>> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        put("dataset", s(&self.dataset));
        put("variant", s(&self.variant));
        put("variant_g", s(&self.variant_g));
        put("variant_d", s(&self.variant_d));
        put("objective", s(&self.objective));
        put("generator_loss", s(&self.generator_loss));
        put("epochs", n(self.epochs));
        put("seed", self.seed.map(|x| x.to_string()));
        put("limit", n(self.limit));
        put("optimizer", s(&self.optimizer));
        put("lr", self.lr.map(|x| x.to_string()));
        put("decay", self.decay.map(|x| x.to_string()));
        put("batch_size", n(self.batch_size));
        put("n_critic", n(self.n_critic));
        put("clip_c", self.clip_c.map(|x| x.to_string()));
        put("bn_g", self.no_bn_g.then(|| "false".to_string()));
        put("bn_d", self.no_bn_d.then(|| "false".to_string()));
        put("fc_layers_g", n(self.fc_layers));
        put("fc_layers_d", n(self.fc_layers));
        put("fc_layers_g", n(self.fc_layers_g));
        put("fc_layers_d", n(self.fc_layers_d));
        put("conv_depth_g", n(self.conv_depth));
        put("conv_depth_d", n(self.conv_depth));
        put("noise_dim", n(self.noise_dim));
        put("eval_every", self.eval_every.map(|x| x.to_string()));
        if let Some(g) = &self.grid {
            let (r, c) = parse_grid(g)?;
            put("grid_rows", Some(r.to_string()));
            put("grid_cols", Some(c.to_string()));
        }
        put(
            "deterministic",
            self.wall_clock.then(|| "false".to_string()),
        );
        Ok(out)
    }

    /// Merged key/value pairs from all three layers.
    pub fn pairs(&self) -> Result<BTreeMap<String, String>> {
        let mut pairs = match &self.config {
            Some(path) => read_config_file(path)?,
            None => BTreeMap::new(),
        };
        for key in CONFIG_KEYS {
            if let Ok(v) = std::env::var(format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                pairs.insert(key.to_string(), v);
            }
        }
        for (k, v) in self.flag_pairs()? {
            pairs.insert(k.to_string(), v);
        }
        Ok(pairs)
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        TrainConfig::from_pairs(&self.pairs()?)
    }
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_pairs(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
