//! CSV loss history: one row per scale per iteration plus a total row.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{LossBundle, ScaleLosses};

pub const LOSS_CSV: &str = "losses.csv";
pub const HEADER: &str = "iter,scale,gan_bs,gan_sb,cyc_b,cyc_s,total";

/// Row label: a 1-based scale index (1 = coarsest) or the iteration total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowScale {
    Scale(usize),
    Total,
}

impl fmt::Display for RowScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowScale::Scale(s) => write!(f, "{s}"),
            RowScale::Total => f.write_str("total"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: u64,
    pub scale: RowScale,
    pub terms: ScaleLosses,
    pub total: f64,
}

impl fmt::Display for LossRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.terms;
        write!(f, "{},{},{},{},{},{},{}", self.iter, self.scale, t.gan_bs, t.gan_sb, t.cyc_b, t.cyc_s, self.total)
    }
}

/// Rows logged for one iteration.
pub fn rows_for(iter: u64, bundle: &LossBundle) -> Vec<LossRow> {
    let mut rows: Vec<LossRow> = bundle
        .scales
        .iter()
        .enumerate()
        .map(|(i, s)| LossRow { iter, scale: RowScale::Scale(i + 1), terms: *s, total: s.weighted(bundle.weights) })
        .collect();
    rows.push(LossRow { iter, scale: RowScale::Total, terms: bundle.summed(), total: bundle.total });
    rows
}

pub fn parse(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        _ => return Err(Error::Data(format!("loss history must start with `{HEADER}`"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| parse_row(line).ok_or_else(|| Error::Data(format!("malformed loss row {}: {line}", i + 2))))
        .collect()
}

fn parse_row(line: &str) -> Option<LossRow> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 7 {
        return None;
    }
    let num = |i: usize| f[i].trim().parse::<f64>().ok();
    let scale = match f[1].trim() {
        "total" => RowScale::Total,
        s => RowScale::Scale(s.parse().ok()?),
    };
    Some(LossRow {
        iter: f[0].trim().parse().ok()?,
        scale,
        terms: ScaleLosses { gan_bs: num(2)?, gan_sb: num(3)?, cyc_b: num(4)?, cyc_s: num(5)? },
        total: num(6)?,
    })
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Append-only writer for the loss CSV.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Start a fresh log containing only the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut log = Self::open(path, false)?;
        writeln!(log.out, "{HEADER}").map_err(|e| Error::io(path, e))?;
        log.flush()?;
        Ok(log)
    }

    /// Reopen an existing log, dropping rows past `iteration`.
    pub fn resume(path: &Path, iteration: u64) -> Result<Self> {
        let rows = if path.exists() { read_loss_csv(path)? } else { Vec::new() };
        let kept: Vec<&LossRow> = rows.iter().filter(|r| r.iter <= iteration).collect();
        let mut text = format!("{HEADER}\n");
        for r in kept {
            text.push_str(&format!("{r}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Self::open(path, true)
    }

    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, iter: u64, bundle: &LossBundle) -> Result<()> {
        for row in rows_for(iter, bundle) {
            writeln!(self.out, "{row}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
