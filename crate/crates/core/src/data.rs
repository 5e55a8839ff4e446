//! Dataset parsers, pixel normalization and image-grid export.
//!
//! Supported inputs: IDX files (MNIST), CIFAR-10 binary batches, and FCT1
//! containers holding `[N,C,H,W]` u8 images plus an optional `[N]` u8 label
//! vector (the converter target for SVHN and CelebA).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::arch::{DatasetKind, FeatureShape};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

/// Gray level of the gaps between grid tiles.
pub const GRID_SEPARATOR_VALUE: u8 = 128;
pub const GRID_SEPARATOR_WIDTH: usize = 2;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train or test)"
            ))),
        }
    }
}

/// Images in NCHW u8 layout with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    split: Split,
    images: Tensor<u8>,
    labels: Option<Tensor<u8>>,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        split: Split,
        images: Tensor<u8>,
        labels: Option<Tensor<u8>>,
    ) -> Result<Self> {
        let s = images.shape();
        let want = kind.image_shape();
        if s.len() != 4 || FeatureShape::from_dims(&s[1..]) != Some(want) {
            return Err(Error::shape(
                "dataset",
                format!("{kind} images must be [N, {}], got {s:?}", dims_chw(want)),
            ));
        }
        if let Some(l) = &labels {
            if l.shape() != [s[0]] {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {} images", l.shape()[0], s[0]),
                ));
            }
            let classes = kind
                .classes()
                .ok_or_else(|| Error::Config(format!("{kind} has no labels")))?;
            if let Some(pos) = l.data().iter().position(|&v| v as usize >= classes) {
                return Err(Error::Domain(format!(
                    "label {} at index {pos} outside {classes} classes",
                    l.data()[pos]
                )));
            }
        }
        Ok(Dataset {
            kind,
            split,
            images,
            labels,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<u8> {
        &self.images
    }

    pub fn labels(&self) -> Option<&Tensor<u8>> {
        self.labels.as_ref()
    }

    /// Keeps the first `n` samples.
    pub fn limit(self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("dataset limit must be positive".into()));
        }
        if n >= self.len() {
            return Ok(self);
        }
        Ok(Dataset {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels.map(|l| l.slice_outer(0, n)).transpose()?,
            ..self
        })
    }

    /// Normalized images at `indices`, shape `[indices.len(), C, H, W]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        Ok(normalize(&self.images.gather_outer(indices)?))
    }

    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no labels", self.kind)))?;
        indices
            .iter()
            .map(|&i| {
                l.data()
                    .get(i)
                    .map(|&v| v as usize)
                    .ok_or_else(|| Error::shape("labels", format!("index {i} outside {}", l.len())))
            })
            .collect()
    }
}

fn dims_chw(s: FeatureShape) -> String {
    match s {
        FeatureShape::Map { c, h, w } => format!("{c}, {h}, {w}"),
        FeatureShape::Flat(n) => n.to_string(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an unsigned-byte IDX file (magic `0x0000_08RR`, RR = rank).
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor<u8>> {
    if bytes.len() < 4 {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated header: expected 4 bytes, found {}", bytes.len()),
        ));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(0, format!("bad IDX magic {magic:#010x}")));
    }
    if bytes[2] != 0x08 {
        return Err(Error::parse(
            2,
            format!(
                "IDX element type {:#04x} is not unsigned byte (magic {magic:#010x})",
                bytes[2]
            ),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::parse(3, "IDX rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::parse(
            bytes.len(),
            format!(
                "truncated header: expected {header} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::parse(
            4 + 4 * i,
            format!("zero dimension in {dims:?}"),
        ));
    }
    let count: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != count {
        let what = if payload < count {
            "truncated"
        } else {
            "oversized"
        };
        return Err(Error::parse(
            header + payload.min(count),
            format!("{what} payload: expected {count} bytes for {dims:?}, found {payload}"),
        ));
    }
    Tensor::new(dims, bytes[header..].to_vec())
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor<u8>> {
    let path = path.as_ref();
    parse_idx(&read_file(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, reason } => Error::Parse {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

/// Parses concatenated CIFAR-10 records (label byte, then R, G, B planes).
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Tensor<u8>, Tensor<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::parse(
            bytes.len() - bytes.len() % CIFAR_RECORD_LEN,
            format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((
        Tensor::new([n, 3, 32, 32], pixels)?,
        Tensor::new([n], labels)?,
    ))
}

pub fn load_cifar_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read_file(p)?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(with_path(parse_cifar_records(&chunk).unwrap_err(), p));
        }
        bytes.extend_from_slice(&chunk);
    }
    let (images, labels) = parse_cifar_records(&bytes)?;
    Dataset::new(DatasetKind::Cifar10, split, images, Some(labels))
}

/// Loads converted images (and labels, if given) from FCT1 containers.
pub fn load_fct_dataset(
    kind: DatasetKind,
    split: Split,
    images: &Path,
    labels: Option<&Path>,
) -> Result<Dataset> {
    let read = |p: &Path| -> Result<Tensor<u8>> {
        let f = File::open(p).map_err(|e| Error::io(p, e))?;
        read_tensor::<u8>(&mut BufReader::new(f)).map_err(|e| with_path(e, p))
    };
    let imgs = read(images)?;
    let labs = labels.map(read).transpose()?;
    Dataset::new(kind, split, imgs, labs)
}

/// Writes a u8 tensor as an FCT1 file.
pub fn save_fct(t: &Tensor<u8>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(t, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

/// Standard file layout below a data directory:
///
/// * `mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`
/// * `cifar10/data_batch_{1..5}.bin`, `cifar10/test_batch.bin`
/// * `svhn/{train,test}_{images,labels}.fct`
/// * `celeba/{train,test}_images.fct`
pub fn load_dataset(kind: DatasetKind, split: Split, data_dir: &Path) -> Result<Dataset> {
    let dir = data_dir.join(kind.name());
    match kind {
        DatasetKind::Mnist => {
            let stem = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = load_idx(dir.join(format!("{stem}-images-idx3-ubyte")))?;
            let labels = load_idx(dir.join(format!("{stem}-labels-idx1-ubyte")))?;
            let s = images.shape().to_vec();
            if s.len() != 3 {
                return Err(Error::shape("mnist", format!("image file has shape {s:?}")));
            }
            let images = images.reshape([s[0], 1, s[1], s[2]])?;
            Dataset::new(kind, split, images, Some(labels))
        }
        DatasetKind::Cifar10 => {
            let paths: Vec<PathBuf> = match split {
                Split::Train => (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar_bin(&paths, split)
        }
        DatasetKind::Svhn => {
            let labels = dir.join(format!("{split}_labels.fct"));
            load_fct_dataset(
                kind,
                split,
                &dir.join(format!("{split}_images.fct")),
                Some(&labels),
            )
        }
        DatasetKind::Celeba => {
            load_fct_dataset(kind, split, &dir.join(format!("{split}_images.fct")), None)
        }
    }
}

/// Maps bytes to `[-1, 1]` via `x / 127.5 - 1`.
pub fn normalize<T: Real>(images: &Tensor<u8>) -> Tensor<T> {
    let scale = T::lit(1.0 / 127.5);
    images.map(|v| T::lit(v as f64) * scale - T::one())
}

/// Inverse of [`normalize`], rounding to the nearest byte and saturating.
pub fn denormalize<T: Real>(images: &Tensor<T>) -> Tensor<u8> {
    images.map(|v| {
        let x = ((v.to_f64().unwrap_or(-1.0) + 1.0) * 127.5).round();
        x.clamp(0.0, 255.0) as u8
    })
}

/// Raster of a `rows × cols` tile grid: (width, height, channels, pixels).
/// Pixels are interleaved per channel, as in PGM/PPM.
pub fn grid_raster<T: Real>(
    images: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::shape(
            "image grid",
            format!("expected [n, 1|3, H, W], got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if rows == 0 || cols == 0 || n != rows * cols {
        return Err(Error::shape(
            "image grid",
            format!("{n} images cannot fill a {rows}x{cols} grid"),
        ));
    }
    let gap = GRID_SEPARATOR_WIDTH;
    let width = cols * w + (cols - 1) * gap;
    let height = rows * h + (rows - 1) * gap;
    let mut raster = vec![GRID_SEPARATOR_VALUE; width * height * c];
    let bytes = denormalize(images);
    let px = bytes.data();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + gap), (i % cols) * (w + gap));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((i * c + ch) * h + y) * w + x;
                    raster[((oy + y) * width + ox + x) * c + ch] = px[src];
                }
            }
        }
    }
    Ok((width, height, c, raster))
}

/// Writes a binary PGM (one channel) or PPM (three channels) grid.
pub fn write_image_grid<T: Real>(
    images: &Tensor<T>,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<()> {
    let (width, height, c, raster) = grid_raster(images, rows, cols)?;
    let (subtype, color) = if c == 1 {
        (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        )
    } else {
        (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        )
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&raster, width as u32, height as u32, color)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}
