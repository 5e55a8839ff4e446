use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::Args;
use fccgan::data::{load_dataset, write_image_grid};
use fccgan::metrics::{
    real_stats, score_model, train_classifier, write_score_csv, ClassifierConfig, EvalClassifier,
    GaussianStats, ScoreOptions, ScoreReport, ACCURACY_FLOOR,
};
use fccgan::{Checkpoint, DatasetKind, Error, Result, Split};

use crate::config::parse_grid;

pub const CLASSIFIER_FILE: &str = "classifier.fckp";
pub const STATS_FILE: &str = "real_stats.fckp";

#[derive(Args, Debug, Clone)]
pub struct DataDir {
    /// Dataset root (mnist/, cifar10/, svhn/, celeba/ below it)
    #[arg(long, env = "FCCGAN_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    dataset: DatasetKind,
    /// Directory receiving classifier.fckp and real_stats.fckp
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataDir,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Train the classifier on the first N samples only
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Real training images used for the feature statistics
    #[arg(long, value_name = "N", default_value_t = 10_000)]
    stats_samples: usize,
    /// Minimum test accuracy
    #[arg(long, default_value_t = ACCURACY_FLOOR)]
    floor: f64,
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let train = load_dataset(args.dataset, Split::Train, &args.data.data_dir)?;
    let test = load_dataset(args.dataset, Split::Test, &args.data.data_dir)?;
    let cfg = ClassifierConfig {
        epochs: args.epochs,
        seed: args.seed,
        limit: args.limit,
        ..ClassifierConfig::default()
    };
    let mut clf = train_classifier(&train, &cfg)?;
    let accuracy = clf.require_accuracy(&test, args.floor)?;
    let stats = real_stats(&mut clf, &train, Some(args.stats_samples))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    clf.save(&args.out.join(CLASSIFIER_FILE))?;
    stats.save(&args.out.join(STATS_FILE))?;
    println!(
        "{} classifier test accuracy {accuracy:.4}; artifacts in {}",
        args.dataset,
        args.out.display()
    );
    Ok(())
}

/// Classifier and real statistics produced by `prepare-eval`.
pub struct EvalArtifacts {
    pub classifier: EvalClassifier,
    pub stats: GaussianStats,
}

impl EvalArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Io {
                    path: p,
                    source: std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "missing evaluation artifact (run `fccgan prepare-eval`)",
                    ),
                })
            }
        };
        Ok(EvalArtifacts {
            classifier: EvalClassifier::load(&need(CLASSIFIER_FILE)?)?,
            stats: GaussianStats::load(&need(STATS_FILE)?)?,
        })
    }
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ScoreFlags {
    /// Generated images per score
    #[arg(long = "samples", default_value_t = 10_000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    /// Independent sample batches behind the FID spread
    #[arg(long, default_value_t = 3)]
    pub fid_repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub score_seed: u64,
}

impl ScoreFlags {
    pub fn options(&self) -> ScoreOptions {
        ScoreOptions {
            n_samples: self.n_samples,
            splits: self.splits,
            fid_repeats: self.fid_repeats,
            seed: self.score_seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Checkpoints to score
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Directory written by `prepare-eval`
    #[arg(long)]
    eval_dir: PathBuf,
    #[command(flatten)]
    flags: ScoreFlags,
    /// Append rows to this CSV (created with a header if missing)
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn append_scores(path: &Path, reports: &[ScoreReport]) -> Result<()> {
    let fresh = !path.exists();
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    write_score_csv(reports, f, fresh)
}

pub fn describe_score(r: &ScoreReport) -> String {
    format!(
        "classifier-score IS {:.3} ± {:.3}, FID {:.3} ± {:.3} ({} samples, {} splits)",
        r.is_mean, r.is_std, r.fid_mean, r.fid_std, r.n_samples, r.splits
    )
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let opts = args.flags.options();
    opts.validate()?;
    let mut eval = EvalArtifacts::load(&args.eval_dir)?;
    let mut reports = Vec::new();
    for path in &args.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let r = score_model(&ckpt, &mut eval.classifier, &eval.stats, &opts)?;
        println!(
            "{} epoch {}: {}",
            path.display(),
            r.epoch,
            describe_score(&r)
        );
        reports.push(r);
    }
    match &args.out {
        Some(out) => append_scores(out, &reports),
        None => write_score_csv(&reports, std::io::stdout().lock(), true),
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output image (.pgm for one channel, .ppm for three)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8x8", value_name = "RxC")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let (rows, cols) = parse_grid(&args.grid)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let images = fccgan::sample(&ckpt, rows * cols, args.seed)?;
    write_image_grid(&images, rows, cols, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
