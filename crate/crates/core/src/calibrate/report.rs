//! Training records and run summaries on disk.

use std::path::Path;

use crate::error::{Error, Result};
use crate::market::{OptionKind, OptionSpec};
use crate::nets::{format_f64, Checkpoint};
use crate::stats::Estimate;

use super::evaluate::InstrumentPrice;
use super::train::Calibration;
use super::Direction;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Constraint mean squared error on the training paths.
    pub mse: f64,
    /// Hedged exotic price on the training paths.
    pub exotic_price: Option<f64>,
    pub lambda: f64,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibReport {
    pub direction: Direction,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Multiplier history `(θ-updates, λ, c)`.
    pub auglag: Vec<(usize, f64, f64)>,
    /// Evaluation MSE.
    pub final_mse: f64,
    pub exotic: Option<(OptionSpec, Estimate)>,
    pub wall_clock_secs: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn parse_opt(s: &str, row: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("row {row}: bad number {s:?}")))
}

impl CalibReport {
    /// `epoch,mse,exotic_price` per training step.
    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mse", "exotic_price"])?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), format_f64(r.mse), opt(r.exotic_price)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Headline numbers of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub direction: Direction,
    pub seed: u64,
    pub model: String,
    pub epochs: usize,
    pub final_mse: f64,
    pub exotic: Option<OptionSpec>,
    pub exotic_price: Option<f64>,
    pub exotic_stderr: Option<f64>,
    pub lambda: Option<f64>,
    pub c: Option<f64>,
    pub wall_clock_secs: f64,
}

impl Summary {
    pub fn of(cal: &Calibration) -> Self {
        let r = &cal.report;
        let last = r.auglag.last();
        Self {
            direction: r.direction,
            seed: r.seed,
            model: cal.model.kind().as_str().to_string(),
            epochs: r.epochs.len(),
            final_mse: r.final_mse,
            exotic: r.exotic.map(|(s, _)| s),
            exotic_price: r.exotic.map(|(_, e)| e.mean),
            exotic_stderr: r.exotic.map(|(_, e)| e.stderr),
            lambda: last.map(|a| a.1),
            c: last.map(|a| a.2),
            wall_clock_secs: r.wall_clock_secs,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cp = Checkpoint::new();
        cp.set("direction", self.direction.as_str());
        cp.set("seed", self.seed.to_string());
        cp.set("model", self.model.as_str());
        cp.set("epochs", self.epochs.to_string());
        cp.set_f64("final_mse", self.final_mse);
        if let Some(x) = &self.exotic {
            cp.set("exotic.kind", x.kind.as_str());
            cp.set_f64("exotic.maturity", x.maturity);
            if let Some(k) = x.strike {
                cp.set_f64("exotic.strike", k);
            }
        }
        for (key, v) in [
            ("exotic_price", self.exotic_price),
            ("exotic_stderr", self.exotic_stderr),
            ("lambda", self.lambda),
            ("c", self.c),
        ] {
            if let Some(v) = v {
                cp.set_f64(key, v);
            }
        }
        cp.set_f64("wall_clock_secs", self.wall_clock_secs);
        cp
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let maybe = |k: &str| cp.get(k).map(|_| cp.get_f64(k)).transpose();
        let exotic = match cp.get("exotic.kind") {
            Some(kind) => Some(OptionSpec {
                kind: OptionKind::parse(kind)?,
                maturity: cp.get_f64("exotic.maturity")?,
                strike: maybe("exotic.strike")?,
            }),
            None => None,
        };
        Ok(Self {
            direction: Direction::parse(cp.require("direction")?)?,
            seed: cp.get_u64("seed")?,
            model: cp.require("model")?.to_string(),
            epochs: cp
                .require("epochs")?
                .parse()
                .map_err(|_| Error::Parse("bad epoch count".into()))?,
            final_mse: cp.get_f64("final_mse")?,
            exotic,
            exotic_price: maybe("exotic_price")?,
            exotic_stderr: maybe("exotic_stderr")?,
            lambda: maybe("lambda")?,
            c: maybe("c")?,
            wall_clock_secs: cp.get_f64("wall_clock_secs")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

const INSTRUMENT_HEADER: [&str; 7] = ["maturity", "strike", "target", "price", "stderr", "iv", "target_iv"];

/// One row of the instrument table: the hedged price when a hedge exists.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentRow {
    pub maturity: f64,
    pub strike: f64,
    pub target: f64,
    pub price: f64,
    pub stderr: f64,
    pub iv: Option<f64>,
    pub target_iv: Option<f64>,
}

impl From<&InstrumentPrice> for InstrumentRow {
    fn from(p: &InstrumentPrice) -> Self {
        Self {
            maturity: p.maturity,
            strike: p.strike,
            target: p.target,
            price: p.cv.mean,
            stderr: p.cv.stderr,
            iv: p.implied_vol,
            target_iv: p.target_vol,
        }
    }
}

pub fn write_instruments_csv(path: &Path, rows: &[InstrumentRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(INSTRUMENT_HEADER)?;
    for r in rows {
        w.write_record([
            format_f64(r.maturity),
            format_f64(r.strike),
            format_f64(r.target),
            format_f64(r.price),
            format_f64(r.stderr),
            opt(r.iv),
            opt(r.target_iv),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instruments_csv(path: &Path) -> Result<Vec<InstrumentRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(INSTRUMENT_HEADER) {
        return Err(Error::Parse(format!("{}: expected header {}", path.display(), INSTRUMENT_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |k: usize| -> Result<f64> {
            parse_opt(&rec[k], row)?.ok_or_else(|| Error::Parse(format!("row {row}: missing {}", INSTRUMENT_HEADER[k])))
        };
        out.push(InstrumentRow {
            maturity: num(0)?,
            strike: num(1)?,
            target: num(2)?,
            price: num(3)?,
            stderr: num(4)?,
            iv: parse_opt(&rec[5], row)?,
            target_iv: parse_opt(&rec[6], row)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{}: no instruments", path.display())));
    }
    Ok(out)
}
