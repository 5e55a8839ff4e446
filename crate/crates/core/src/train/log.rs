use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LOSS_LOG_HEADER: [&str; 5] = ["iter", "epoch", "d_loss", "g_loss", "wall_ms"];

/// One generator iteration. `d_loss` is averaged over the critic updates of
/// that iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: u64,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    rows: Vec<LossRow>,
}

fn csv_err(path: &str, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(offset, format!("{path}: {other:?}")),
    }
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: LossRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean `(d_loss, g_loss)` over the rows accepted by `keep`.
    pub fn mean_losses(&self, keep: impl Fn(&LossRow) -> bool) -> Option<(f64, f64)> {
        let picked: Vec<&LossRow> = self.rows.iter().filter(|r| keep(r)).collect();
        if picked.is_empty() {
            return None;
        }
        let n = picked.len() as f64;
        let d = picked.iter().map(|r| r.d_loss).sum::<f64>() / n;
        let g = picked.iter().map(|r| r.g_loss).sum::<f64>() / n;
        Some((d, g))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e| csv_err("<loss log>", e);
        w.write_record(LOSS_LOG_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                r.epoch.to_string(),
                r.d_loss.to_string(),
                r.g_loss.to_string(),
                r.wall_ms.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<loss log>", e))
    }

    pub fn read_csv(input: impl Read) -> Result<LossLog> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| csv_err("<loss log>", e))?;
        if header.iter().ne(LOSS_LOG_HEADER) {
            return Err(Error::parse(
                0,
                format!("unexpected loss log header {header:?}"),
            ));
        }
        let mut log = LossLog::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err("<loss log>", e))?;
            let offset = rec.position().map_or(0, |p| p.byte() as usize);
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |i: usize| {
                Error::parse(
                    offset,
                    format!("bad {} value `{}`", LOSS_LOG_HEADER[i], field(i)),
                )
            };
            log.push(LossRow {
                iter: field(0).parse().map_err(|_| bad(0))?,
                epoch: field(1).parse().map_err(|_| bad(1))?,
                d_loss: field(2).parse().map_err(|_| bad(2))?,
                g_loss: field(3).parse().map_err(|_| bad(3))?,
                wall_ms: field(4).parse().map_err(|_| bad(4))?,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<LossLog> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        LossLog::read_csv(std::io::BufReader::new(f))
    }
}
