use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, ValueEnum};
use fccgan::arch::describe as describe_arch;
use fccgan::data::{load_dataset, write_image_grid};
use fccgan::metrics::{score_generator, ScoreReport};
use fccgan::train::{generate, Event, LossLog, Trainer};
use fccgan::{Checkpoint, Dataset, Error, Result, Split, TrainConfig};

use crate::config::{read_config_file, ConfigArgs};
use crate::eval::{append_scores, describe_score, DataDir, EvalArtifacts, ScoreFlags};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SCORE_FILE: &str = "scores.csv";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.fckp";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.fckp";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub fn describe(config: &ConfigArgs, run: Option<&Path>) -> Result<()> {
    let cfg = match run {
        Some(dir) => TrainConfig::from_pairs(&read_config_file(&dir.join(CONFIG_FILE))?)?,
        None => config.resolve()?,
    };
    print!("{}", describe_arch(&cfg.arch)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Continue the run in --out from its last checkpoint
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    data: DataDir,
    /// Score at every evaluation point with artifacts from `prepare-eval`
    #[arg(long, value_name = "DIR")]
    eval_dir: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreFlags,
    #[arg(long, short)]
    quiet: bool,
}

/// Everything needed to execute one run into a directory.
struct RunPlan<'a> {
    dir: PathBuf,
    data: &'a Dataset,
    eval: Option<&'a EvalArtifacts>,
    score: ScoreFlags,
    quiet: bool,
}

struct RunSummary {
    log: LossLog,
    last_epoch: usize,
    scores: Vec<ScoreReport>,
}

impl RunPlan<'_> {
    fn eval_point(
        &self,
        trainer: &Trainer,
        log: &LossLog,
        tag: &str,
        scores: &mut Vec<ScoreReport>,
    ) -> Result<()> {
        let cfg = trainer.config();
        let ckpt = trainer.checkpoint();
        ckpt.save(&self.dir.join(format!("checkpoints/{tag}.fckp")))?;
        ckpt.save(&self.dir.join(LAST_CHECKPOINT))?;
        log.save(&self.dir.join(LOSS_FILE))?;
        let ext = if cfg.arch.dataset.image_shape().len() == 28 * 28 {
            "pgm"
        } else {
            "ppm"
        };
        let mut g = trainer.generator().clone();
        let grid = generate(&mut g, cfg.grid_rows * cfg.grid_cols, cfg.seed)?;
        write_image_grid(
            &grid,
            cfg.grid_rows,
            cfg.grid_cols,
            &self.dir.join(format!("samples/{tag}.{ext}")),
        )?;
        if let Some(eval) = self.eval {
            let mut clf = eval.classifier.clone();
            let mut report = score_generator(&mut g, &mut clf, &eval.stats, &self.score.options())?;
            report.epoch = trainer.progress().epoch;
            append_scores(&self.dir.join(SCORE_FILE), &[report])?;
            if !self.quiet {
                println!("  {tag}: {}", describe_score(&report));
            }
            scores.push(report);
        }
        Ok(())
    }

    fn execute(&self, mut trainer: Trainer, mut log: LossLog) -> Result<RunSummary> {
        create_dir(&self.dir.join("checkpoints"))?;
        create_dir(&self.dir.join("samples"))?;
        let mut scores = Vec::new();
        if trainer.progress().iteration == 0 {
            self.eval_point(&trainer, &log, "epoch-000", &mut scores)?;
        }
        let epochs = trainer.config().epochs;
        // `run` holds the log mutably; the hook keeps its own copy for the
        // loss file written at evaluation points.
        let mut shadow = log.clone();
        let outcome = trainer.run(self.data, None, &mut log, |t, ev| match ev {
            Event::Iteration(row) => {
                shadow.push(row);
                Ok(())
            }
            Event::EpochEnd { epoch } => {
                if !self.quiet {
                    let (d, g) = shadow
                        .mean_losses(|r| r.epoch == epoch)
                        .unwrap_or((f64::NAN, f64::NAN));
                    println!("epoch {epoch}/{epochs}: d_loss {d:.4} g_loss {g:.4}");
                }
                self.eval_point(t, &shadow, &format!("epoch-{epoch:03}"), &mut scores)
            }
            Event::EvalPoint { iteration } => {
                self.eval_point(t, &shadow, &format!("iter-{iteration:07}"), &mut scores)
            }
            Event::CriticUpdate { .. } => Ok(()),
        });
        if let Err(e) = outcome {
            if matches!(e, Error::Numerical(_)) {
                trainer
                    .checkpoint()
                    .save(&self.dir.join(DIAGNOSTIC_CHECKPOINT))?;
                log.save(&self.dir.join(LOSS_FILE))?;
            }
            return Err(e);
        }
        trainer.checkpoint().save(&self.dir.join(LAST_CHECKPOINT))?;
        log.save(&self.dir.join(LOSS_FILE))?;
        Ok(RunSummary {
            last_epoch: trainer.progress().epoch,
            log,
            scores,
        })
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let dir = &args.out;
    let config_path = dir.join(CONFIG_FILE);
    let (trainer, log) = if args.resume {
        let ckpt = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
        let mut cfg = ckpt.config().clone();
        if let Some(e) = args.config.epochs {
            cfg.epochs = e;
        }
        let mut trainer = Trainer::from_checkpoint(&ckpt)?;
        if cfg.epochs != trainer.config().epochs {
            let mut a = ckpt.archive().clone();
            a.config = cfg.to_text();
            trainer = Trainer::from_checkpoint(&Checkpoint::from_archive(a)?)?;
        }
        let done = trainer.progress().iteration;
        let mut log = LossLog::new();
        if dir.join(LOSS_FILE).exists() {
            for r in LossLog::load(&dir.join(LOSS_FILE))?
                .rows()
                .iter()
                .filter(|r| r.iter <= done)
            {
                log.push(*r);
            }
        }
        std::fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
        (trainer, log)
    } else {
        let cfg = args.config.resolve()?;
        if config_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose another --out",
                dir.display()
            )));
        }
        let trainer = Trainer::new(cfg)?;
        create_dir(dir)?;
        std::fs::write(&config_path, trainer.config().to_text()).map_err(io_err(&config_path))?;
        (trainer, LossLog::new())
    };
    let data = load_dataset(
        trainer.config().arch.dataset,
        Split::Train,
        &args.data.data_dir,
    )?;
    let eval = args
        .eval_dir
        .as_deref()
        .map(EvalArtifacts::load)
        .transpose()?;
    if eval.is_some() {
        args.score.options().validate()?;
    }
    let plan = RunPlan {
        dir: dir.clone(),
        data: &data,
        eval: eval.as_ref(),
        score: args.score,
        quiet: args.quiet,
    };
    let summary = plan.execute(trainer, log)?;
    if !args.quiet {
        println!(
            "finished {} epochs, {} iterations; run directory {}",
            summary.last_epoch,
            summary.log.len(),
            dir.display()
        );
    }
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    FcDepthBoth,
    FcDepthG,
    FcDepthD,
    ConvDepth,
    BnGrid,
    OptimizerGrid,
}

impl SweepAxis {
    /// Grid points as (label, config overrides).
    fn points(self, values: &[String]) -> Vec<(String, Vec<(&'static str, String)>)> {
        let pick = |default: &[&str]| -> Vec<String> {
            if values.is_empty() {
                default.iter().map(|s| s.to_string()).collect()
            } else {
                values.to_vec()
            }
        };
        let depths = ["1", "2", "3", "4", "5"];
        match self {
            SweepAxis::FcDepthBoth => pick(&depths)
                .into_iter()
                .map(|v| {
                    (
                        v.clone(),
                        vec![("fc_layers_g", v.clone()), ("fc_layers_d", v)],
                    )
                })
                .collect(),
            SweepAxis::FcDepthG => pick(&depths)
                .into_iter()
                .map(|v| (v.clone(), vec![("fc_layers_g", v)]))
                .collect(),
            SweepAxis::FcDepthD => pick(&depths)
                .into_iter()
                .map(|v| (v.clone(), vec![("fc_layers_d", v)]))
                .collect(),
            SweepAxis::ConvDepth => pick(&["4", "7"])
                .into_iter()
                .map(|v| {
                    (
                        v.clone(),
                        vec![("conv_depth_g", v.clone()), ("conv_depth_d", v)],
                    )
                })
                .collect(),
            SweepAxis::BnGrid => pick(&["BN-BN", "NBN-BN", "BN-NBN", "NBN-NBN"])
                .into_iter()
                .map(|label| {
                    let (g, d) = label.split_once('-').unwrap_or((&label, &label));
                    let on = |s: &str| (s == "BN").to_string();
                    let pairs = vec![("bn_g", on(g)), ("bn_d", on(d))];
                    (label.clone(), pairs)
                })
                .collect(),
            SweepAxis::OptimizerGrid => pick(&["adam", "rmsprop", "sgd"])
                .into_iter()
                .map(|v| (v.clone(), vec![("optimizer", v)]))
                .collect(),
        }
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Grid values replacing the axis defaults
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving one run directory per point and sweep.csv
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataDir,
    #[arg(long, value_name = "DIR")]
    eval_dir: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreFlags,
    /// Runs executed in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub const SWEEP_FILE: &str = "sweep.csv";
const SWEEP_HEADER: &str =
    "axis,point,epoch,d_loss,g_loss,is_mean,is_std,fid_mean,fid_std,n_samples";

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = args.config.pairs()?;
    let points: Vec<(String, TrainConfig)> = args
        .axis
        .points(&args.values)
        .into_iter()
        .map(|(label, overrides)| {
            let mut pairs = base.clone();
            for (k, v) in overrides {
                pairs.insert(k.to_string(), v);
            }
            TrainConfig::from_pairs(&pairs)
                .map(|cfg| (label.clone(), cfg))
                .map_err(|e| Error::Config(format!("sweep point {label}: {e}")))
        })
        .collect::<Result<_>>()?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    let kind = points[0].1.arch.dataset;
    let data = load_dataset(kind, Split::Train, &args.data.data_dir)?;
    let eval = args
        .eval_dir
        .as_deref()
        .map(EvalArtifacts::load)
        .transpose()?;
    if eval.is_some() {
        args.score.options().validate()?;
    }
    create_dir(&args.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((label, cfg)) = points.get(i) else {
                    break;
                };
                let dir = args.out.join(format!("point-{label}"));
                let run = || -> Result<RunSummary> {
                    create_dir(&dir)?;
                    let path = dir.join(CONFIG_FILE);
                    std::fs::write(&path, cfg.to_text()).map_err(io_err(&path))?;
                    let plan = RunPlan {
                        dir: dir.clone(),
                        data: &data,
                        eval: eval.as_ref(),
                        score: args.score,
                        quiet: true,
                    };
                    plan.execute(Trainer::new(cfg.clone())?, LossLog::new())
                };
                let outcome = run();
                match &outcome {
                    Ok(_) => println!("{:?} {label}: done", args.axis),
                    Err(e) => eprintln!("{:?} {label}: {e}", args.axis),
                }
                results.lock().expect("no poisoned runs")[i] = Some(outcome);
            });
        }
    });

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let axis = args
        .axis
        .to_possible_value()
        .expect("named")
        .get_name()
        .to_string();
    for ((label, _), outcome) in points
        .iter()
        .zip(results.into_inner().expect("no poisoned runs"))
    {
        let summary = outcome.expect("every point ran")?;
        let e = summary.last_epoch;
        let (d, g) = summary
            .log
            .mean_losses(|r| r.epoch == e)
            .unwrap_or((f64::NAN, f64::NAN));
        let score = summary.scores.last().filter(|r| r.epoch == e);
        let cells = score.map_or_else(
            || ",,,,".to_string(),
            |r| {
                format!(
                    "{},{},{},{},{}",
                    r.is_mean, r.is_std, r.fid_mean, r.fid_std, r.n_samples
                )
            },
        );
        csv.push_str(&format!("{axis},{label},{e},{d},{g},{cells}\n"));
    }
    let path = args.out.join(SWEEP_FILE);
    std::fs::write(&path, &csv).map_err(io_err(&path))?;
    print!("{csv}");
    Ok(())
}
