//! Classifier-based sample quality scores: an Inception-style score over the
//! class posterior and the Fréchet distance between feature Gaussians.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{init_parameters, DatasetKind, LayerSpec, ModelSpec, Network};
use crate::archive::Archive;
use crate::autograd::{softmax_rows, Activation, BnMode, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::{ConvGeometry, Tensor};
use crate::train::{derive_seed, generate, Checkpoint, SeedTag};

pub const DEFAULT_SPLITS: usize = 10;
pub const ACCURACY_FLOOR: f64 = 0.95;
pub const FEATURE_DIM: usize = 128;
/// Eigenvalues down to this (scaled by the largest one) are treated as
/// rounding noise and clamped to zero.
pub const EIGEN_TOLERANCE: f64 = 1e-8;
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
pub const SCORE_HEADER: [&str; 6] = [
    "epoch",
    "is_mean",
    "is_std",
    "fid_mean",
    "fid_std",
    "n_samples",
];

const EVAL_CHUNK: usize = 500;
const CLASSIFIER_TAG: &str = "kind=classifier";

/// Two 3×3 convolution blocks with average pooling, a 128-unit feature layer
/// and a linear class layer.
pub fn classifier_spec(kind: DatasetKind) -> Result<ModelSpec> {
    let classes = kind
        .classes()
        .ok_or_else(|| Error::Config(format!("{kind} has no labels to train a classifier on")))?;
    let same = ConvGeometry::new(3, 1, 1);
    let layers = vec![
        LayerSpec::conv(32, same),
        LayerSpec::Act(Activation::Relu),
        LayerSpec::Pool { size: 2 },
        LayerSpec::conv(64, same),
        LayerSpec::Act(Activation::Relu),
        LayerSpec::Pool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::fc(FEATURE_DIM),
        LayerSpec::Act(Activation::Relu),
        LayerSpec::fc(classes),
    ];
    ModelSpec::new(kind.image_shape(), layers)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train on the first `limit` samples only.
    pub limit: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            limit: None,
        }
    }
}

/// Supervised classifier whose softmax output and penultimate activations
/// drive the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalClassifier {
    dataset: DatasetKind,
    net: Network<f32>,
}

impl EvalClassifier {
    pub fn new(dataset: DatasetKind, seed: u64) -> Result<Self> {
        let spec = classifier_spec(dataset)?;
        let net = init_parameters(&spec, "c", derive_seed(seed, SeedTag::Classifier));
        Ok(EvalClassifier { dataset, net })
    }

    pub fn dataset(&self) -> DatasetKind {
        self.dataset
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.net.spec().output().len()
    }

    fn feature_layer(&self) -> usize {
        self.net.spec().layers().len() - 2
    }

    /// Class probabilities `[N, K]` and features `[N, FEATURE_DIM]`.
    pub fn evaluate(&mut self, images: &Tensor<f32>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let n = images.shape()[0];
        let k = self.classes();
        let mut probs = Vec::with_capacity(n * k);
        let mut feats = Vec::with_capacity(n * FEATURE_DIM);
        let feature_layer = self.feature_layer();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = images.slice_outer(start, (start + EVAL_CHUNK).min(n))?;
            let mut tape = Tape::new();
            let params = self.net.push_params(&mut tape, false);
            let x = tape.constant(chunk);
            let outs = self.net.forward(&mut tape, &params, x, BnMode::Eval)?;
            let logits: Vec<f64> = tape
                .value(outs[outs.len() - 1])
                .data()
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            probs.extend(softmax_rows(&logits, k));
            feats.extend(
                tape.value(outs[feature_layer])
                    .data()
                    .iter()
                    .map(|&v| f64::from(v)),
            );
        }
        Ok((
            Tensor::new([n, k], probs)?,
            Tensor::new([n, FEATURE_DIM], feats)?,
        ))
    }

    /// Fraction of `data` whose most probable class matches the label.
    pub fn accuracy(&mut self, data: &Dataset) -> Result<f64> {
        let labels = data
            .labels()
            .ok_or_else(|| {
                Error::Config(format!("{} {} has no labels", data.kind(), data.split()))
            })?
            .clone();
        let images = data.batch::<f32>(&(0..data.len()).collect::<Vec<_>>())?;
        let (probs, _) = self.evaluate(&images)?;
        let k = self.classes();
        let correct = probs
            .data()
            .chunks(k)
            .zip(labels.data())
            .filter(|(row, &label)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &p)| if p > row[b] { i } else { b });
                best == label as usize
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Fails with [`Error::AccuracyFloor`] when accuracy on `test` is below
    /// `floor`; the scores would be meaningless.
    pub fn require_accuracy(&mut self, test: &Dataset, floor: f64) -> Result<f64> {
        let accuracy = self.accuracy(test)?;
        if accuracy < floor {
            return Err(Error::AccuracyFloor { accuracy, floor });
        }
        Ok(accuracy)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(format!("{CLASSIFIER_TAG}\ndataset={}\n", self.dataset));
        for (name, t) in self.net.named_tensors() {
            a.push(name, t);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut lines = a.config.lines();
        let dataset = match (
            lines.next(),
            lines.next().and_then(|l| l.strip_prefix("dataset=")),
        ) {
            (Some(CLASSIFIER_TAG), Some(name)) => name.parse()?,
            _ => {
                return Err(Error::Config(
                    "archive does not hold an evaluation classifier".into(),
                ))
            }
        };
        let mut c = EvalClassifier::new(dataset, 0)?;
        c.net.load_named(|name| a.tensor::<f32>(name).ok())?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        EvalClassifier::from_archive(&Archive::load(path)?)
    }
}

/// Cross-entropy training with Adam. Deterministic in `cfg.seed`.
pub fn train_classifier(data: &Dataset, cfg: &ClassifierConfig) -> Result<EvalClassifier> {
    if data.labels().is_none() {
        return Err(Error::Config(format!("{} has no labels", data.kind())));
    }
    let mut clf = EvalClassifier::new(data.kind(), cfg.seed)?;
    let mut opt = Optimizer::new(
        OptimizerConfig::new(OptimizerKind::Adam, cfg.lr),
        clf.net.params(),
    )?;
    let n = cfg.limit.map_or(data.len(), |l| l.min(data.len()));
    if n < cfg.batch_size || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "{n} samples cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedTag::Shuffle));
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(cfg.batch_size) {
            let mut tape = Tape::new();
            let params = clf.net.push_params(&mut tape, true);
            let x = tape.constant(data.batch::<f32>(idx)?);
            let outs = clf.net.forward(&mut tape, &params, x, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(outs[outs.len() - 1], &data.labels_at(idx)?)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite classifier loss {value}"
                )));
            }
            tape.backward(loss)?;
            let grads = clf.net.gradients(&tape, &params);
            opt.step(clf.net.params_mut(), &grads)?;
        }
    }
    Ok(clf)
}

/// Inception-style score: per split, `exp(mean KL(p(y|x) || p(y)))`.
/// Returns the mean and population standard deviation over splits. Rows
/// beyond the largest multiple of `splits` are dropped.
pub fn inception_score(probs: &Tensor<f64>, splits: usize) -> Result<(f64, f64)> {
    let &[n, k] = probs.shape() else {
        return Err(Error::shape(
            "inception_score",
            format!("expected [N, K], got {:?}", probs.shape()),
        ));
    };
    if splits == 0 || n < splits {
        return Err(Error::Domain(format!(
            "{n} rows cannot form {splits} splits"
        )));
    }
    for (i, row) in probs.data().chunks(k).enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain(format!(
                "row {i} has a negative or NaN probability"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("row {i} sums to {total}, not 1")));
        }
    }
    let part = n / splits;
    let scores: Vec<f64> = probs.data()[..part * splits * k]
        .chunks(part * k)
        .map(|block| {
            let mut marginal = vec![0.0; k];
            for row in block.chunks(k) {
                for (m, &p) in marginal.iter_mut().zip(row) {
                    *m += p / part as f64;
                }
            }
            let kl: f64 = block
                .chunks(k)
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(&p, _)| p > 0.0)
                        .map(|(&p, &m)| p * (p / m).ln())
                        .sum::<f64>()
                })
                .sum();
            (kl / part as f64).exp()
        })
        .collect();
    Ok(mean_std(&scores))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and unbiased covariance of a feature cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(
            "matrix",
            format!("{what} is {}x{}", m.nrows(), m.ncols()),
        ));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::Numerical(format!(
            "{what} is not symmetric (max deviation {asym:e})"
        )));
    }
    Ok(())
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&sigma, "covariance")?;
        if sigma.nrows() != mu.len() {
            return Err(Error::shape(
                "gaussian_stats",
                format!(
                    "mean of length {} with {}x{} covariance",
                    mu.len(),
                    sigma.nrows(),
                    sigma.ncols()
                ),
            ));
        }
        Ok(GaussianStats { mu, sigma })
    }

    /// Statistics of the rows of `features` (`[N, D]`, N ≥ 2).
    pub fn from_features(features: &Tensor<f64>) -> Result<Self> {
        let &[n, d] = features.shape() else {
            return Err(Error::shape(
                "gaussian_stats",
                format!("expected [N, D], got {:?}", features.shape()),
            ));
        };
        if n < 2 {
            return Err(Error::Domain(
                "covariance needs at least two samples".into(),
            ));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        GaussianStats::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_archive(&self) -> Archive {
        let d = self.dim();
        let mut a = Archive::new("kind=gaussian_stats\n");
        a.push(
            "mu",
            Tensor::new([d], self.mu.as_slice().to_vec()).expect("positive dim"),
        );
        let rows: Vec<f64> = self.sigma.transpose().as_slice().to_vec();
        a.push("sigma", Tensor::new([d, d], rows).expect("square"));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mu = a.tensor::<f64>("mu")?;
        let sigma = a.tensor::<f64>("sigma")?;
        let d = mu.len();
        if sigma.shape() != [d, d] {
            return Err(Error::shape(
                "gaussian_stats",
                format!("sigma {:?} for mean of {d}", sigma.shape()),
            ));
        }
        GaussianStats::new(
            DVector::from_column_slice(mu.data()),
            DMatrix::from_row_slice(d, d, sigma.data()),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        GaussianStats::from_archive(&Archive::load(path)?)
    }
}

/// Eigenvalues of a symmetric matrix with rounding noise clamped to zero.
fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m, what)?;
    let mut eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    for l in eig.eigenvalues.iter_mut() {
        if *l < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {l:e}, not positive semi-definite"
            )));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, "matrix")?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `|mu_a - mu_b|^2 + tr(Σa + Σb - 2 (Σa Σb)^(1/2))`. The trace of the
/// product root is taken through the symmetric matrix `Σa^(1/2) Σb Σa^(1/2)`,
/// which has the same eigenvalues as `Σa Σb`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimensions {} and {}", a.dim(), b.dim()),
        ));
    }
    let root_a = matrix_sqrt_psd(&a.sigma)?;
    let inner = &root_a * &b.sigma * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = clamped_eigen(&inner, "covariance product")?;
    let trace_root: f64 = eig.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * trace_root;
    Ok(value.max(0.0))
}

/// One evaluation of a generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub epoch: usize,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid_mean: f64,
    pub fid_std: f64,
    pub n_samples: usize,
    pub splits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub n_samples: usize,
    pub splits: usize,
    /// Independent sample batches for the FID dispersion.
    pub fid_repeats: usize,
    pub seed: u64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            n_samples: 10_000,
            splits: DEFAULT_SPLITS,
            fid_repeats: 3,
            seed: 0,
        }
    }
}

impl ScoreOptions {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 || self.n_samples < 10 * self.splits {
            return Err(Error::Config(format!(
                "{} samples are too few for {} splits (need at least {})",
                self.n_samples,
                self.splits,
                10 * self.splits
            )));
        }
        if self.fid_repeats == 0 {
            return Err(Error::Config("fid_repeats must be positive".into()));
        }
        Ok(())
    }
}

/// Scores a set of images: IS over splits, FID against `real` (a single
/// measurement, so the dispersion is zero).
pub fn score_images(
    images: &Tensor<f32>,
    classifier: &mut EvalClassifier,
    real: &GaussianStats,
    splits: usize,
) -> Result<ScoreReport> {
    let (probs, feats) = classifier.evaluate(images)?;
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    let fid = frechet_distance(&GaussianStats::from_features(&feats)?, real)?;
    Ok(ScoreReport {
        epoch: 0,
        is_mean,
        is_std,
        fid_mean: fid,
        fid_std: 0.0,
        n_samples: images.shape()[0],
        splits,
    })
}

/// IS from the first sample batch; FID mean and population std over
/// `fid_repeats` batches drawn with distinct noise.
pub fn score_generator(
    generator: &mut Network<f32>,
    classifier: &mut EvalClassifier,
    real: &GaussianStats,
    opts: &ScoreOptions,
) -> Result<ScoreReport> {
    opts.validate()?;
    let mut fids = Vec::with_capacity(opts.fid_repeats);
    let mut is = (0.0, 0.0);
    for r in 0..opts.fid_repeats {
        let seed = opts.seed.wrapping_add(r as u64);
        let images = generate(generator, opts.n_samples, seed)?;
        let report = score_images(&images, classifier, real, opts.splits)?;
        if r == 0 {
            is = (report.is_mean, report.is_std);
        }
        fids.push(report.fid_mean);
    }
    let (fid_mean, fid_std) = mean_std(&fids);
    Ok(ScoreReport {
        epoch: 0,
        is_mean: is.0,
        is_std: is.1,
        fid_mean,
        fid_std,
        n_samples: opts.n_samples,
        splits: opts.splits,
    })
}

/// Scores the generator in `ckpt`, tagging the report with its epoch count.
pub fn score_model(
    ckpt: &Checkpoint,
    classifier: &mut EvalClassifier,
    real: &GaussianStats,
    opts: &ScoreOptions,
) -> Result<ScoreReport> {
    if classifier.dataset() != ckpt.config().arch.dataset {
        return Err(Error::Config(format!(
            "classifier was trained on {}, checkpoint generates {}",
            classifier.dataset(),
            ckpt.config().arch.dataset
        )));
    }
    let mut g = ckpt.generator()?;
    let mut report = score_generator(&mut g, classifier, real, opts)?;
    report.epoch = ckpt.progress()?.epoch;
    Ok(report)
}

/// Feature statistics of (the first `limit` images of) a real dataset.
pub fn real_stats(
    classifier: &mut EvalClassifier,
    data: &Dataset,
    limit: Option<usize>,
) -> Result<GaussianStats> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let images = data.batch::<f32>(&(0..n).collect::<Vec<_>>())?;
    let (_, feats) = classifier.evaluate(&images)?;
    GaussianStats::from_features(&feats)
}

/// The epoch of the first report whose IS mean reaches `threshold`.
pub fn epochs_to_score(history: &[ScoreReport], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.is_mean >= threshold)
        .map(|r| r.epoch)
}

pub fn write_score_csv(reports: &[ScoreReport], out: impl Write, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let err = |e: csv::Error| Error::Config(format!("writing scores: {e}"));
    if header {
        w.write_record(SCORE_HEADER).map_err(err)?;
    }
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            r.is_mean.to_string(),
            r.is_std.to_string(),
            r.fid_mean.to_string(),
            r.fid_std.to_string(),
            r.n_samples.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))
}

/// Reads rows written by [`write_score_csv`]; `splits` is not stored and is
/// reported as [`DEFAULT_SPLITS`].
pub fn read_score_csv(input: impl Read) -> Result<Vec<ScoreReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::parse(0, e.to_string()))?;
    if header.iter().ne(SCORE_HEADER) {
        return Err(Error::parse(
            0,
            format!("unexpected score header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(0, e.to_string()))?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(offset, format!("bad {} value", SCORE_HEADER[i])))
        };
        out.push(ScoreReport {
            epoch: f(0)? as usize,
            is_mean: f(1)?,
            is_std: f(2)?,
            fid_mean: f(3)?,
            fid_std: f(4)?,
            n_samples: f(5)? as usize,
            splits: DEFAULT_SPLITS,
        });
    }
    Ok(out)
}
