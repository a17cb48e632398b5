//! Market price surfaces and their CSV form.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::nets::TIME_EPS;

use super::black_scholes::{implied_vol, ImpliedVolError};

const SURFACE_HEADER: [&str; 4] = ["maturity", "strike", "price", "stderr"];
const LOOKBACK_HEADER: [&str; 3] = ["maturity", "price", "stderr"];

/// One discounted call price.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quote {
    pub maturity: f64,
    pub strike: f64,
    pub price: f64,
    pub stderr: Option<f64>,
}

/// Reference price of the lookback at one maturity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LookbackQuote {
    pub maturity: f64,
    pub price: f64,
    pub stderr: f64,
}

/// Call prices on a maturity × strike grid, sorted by maturity then strike.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketSurface {
    quotes: Vec<Quote>,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_EPS * a.abs().max(1.0)
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

impl MarketSurface {
    pub fn new(mut quotes: Vec<Quote>) -> Result<Self> {
        if quotes.is_empty() {
            return Err(invalid("market surface has no quotes"));
        }
        for (i, q) in quotes.iter().enumerate() {
            if !(q.maturity > 0.0 && q.maturity.is_finite() && q.strike > 0.0 && q.strike.is_finite()) {
                return Err(invalid(format!("quote {i}: bad maturity {} or strike {}", q.maturity, q.strike)));
            }
            if !(q.price >= 0.0 && q.price.is_finite()) {
                return Err(invalid(format!("quote {i}: price {} must be nonnegative", q.price)));
            }
            if q.stderr.is_some_and(|e| !(e >= 0.0 && e.is_finite())) {
                return Err(invalid(format!("quote {i}: bad standard error")));
            }
        }
        quotes.sort_by(|a, b| a.maturity.total_cmp(&b.maturity).then(a.strike.total_cmp(&b.strike)));
        if quotes
            .windows(2)
            .any(|w| same_time(w[0].maturity, w[1].maturity) && w[0].strike == w[1].strike)
        {
            return Err(invalid("duplicate (maturity, strike) quote"));
        }
        Ok(Self { quotes })
    }

    pub fn quotes(&self) -> &[Quote] {
        &self.quotes
    }

    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    pub fn maturities(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for q in &self.quotes {
            if out.last().map_or(true, |&t| !same_time(t, q.maturity)) {
                out.push(q.maturity);
            }
        }
        out
    }

    /// Quotes at maturity `t`, by increasing strike.
    pub fn slice(&self, t: f64) -> Vec<Quote> {
        self.quotes.iter().filter(|q| same_time(q.maturity, t)).copied().collect()
    }

    pub fn strikes(&self, t: f64) -> Vec<f64> {
        self.slice(t).iter().map(|q| q.strike).collect()
    }

    /// Sub-surface on the given maturities.
    pub fn restrict(&self, maturities: &[f64]) -> Result<Self> {
        let quotes: Vec<Quote> = self
            .quotes
            .iter()
            .filter(|q| maturities.iter().any(|&t| same_time(t, q.maturity)))
            .copied()
            .collect();
        for &t in maturities {
            if !quotes.iter().any(|q| same_time(q.maturity, t)) {
                return Err(invalid(format!("no quotes at maturity {t}")));
            }
        }
        Self::new(quotes)
    }

    /// Places where a call price rises with strike by more than three
    /// standard errors.
    pub fn arbitrage_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in self.maturities() {
            for w in self.slice(t).windows(2) {
                let tol = 3.0 * (w[0].stderr.unwrap_or(0.0).powi(2) + w[1].stderr.unwrap_or(0.0).powi(2)).sqrt();
                if w[1].price > w[0].price + tol {
                    out.push(format!(
                        "T={t}: call price increases from {} at K={} to {} at K={}",
                        w[0].price, w[0].strike, w[1].price, w[1].strike
                    ));
                }
            }
        }
        out
    }

    /// Black–Scholes implied volatility of every quote.
    pub fn implied_vols(&self, s0: f64, r: f64) -> Vec<Result<f64, ImpliedVolError>> {
        self.quotes
            .iter()
            .map(|q| implied_vol(q.price, s0, q.strike, r, q.maturity))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(SURFACE_HEADER)?;
        for q in &self.quotes {
            let e = q.stderr.map(fmt).unwrap_or_default();
            w.write_record([fmt(q.maturity), fmt(q.strike), fmt(q.price), e])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_strict(path, &SURFACE_HEADER)?;
        let mut quotes = Vec::with_capacity(rows.len());
        for (line, rec) in rows {
            let q = Quote {
                maturity: parse_field(&rec[0], "maturity", line)?,
                strike: parse_field(&rec[1], "strike", line)?,
                price: parse_field(&rec[2], "price", line)?,
                stderr: if rec[3].is_empty() {
                    None
                } else {
                    Some(parse_field(&rec[3], "stderr", line)?)
                },
            };
            if q.price < 0.0 {
                return Err(Error::Parse(format!("row {line}: negative price {}", q.price)));
            }
            quotes.push(q);
        }
        Self::new(quotes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

fn parse_field(s: &str, name: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {line}: cannot parse {name} from {s:?}")))
}

/// Reads all records after checking the header exactly. Lines are
/// numbered from 1 with the header on line 1.
fn read_strict(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let found = r.headers()?.clone();
    if found.is_empty() {
        return Err(Error::Parse(format!("{}: empty file", path.display())));
    }
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(Error::Parse(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("row {line}: expected {} fields", header.len())));
        }
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

pub fn write_lookback_csv(path: &Path, quotes: &[LookbackQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOOKBACK_HEADER)?;
    for q in quotes {
        w.write_record([fmt(q.maturity), fmt(q.price), fmt(q.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lookback_csv(path: &Path) -> Result<Vec<LookbackQuote>> {
    read_strict(path, &LOOKBACK_HEADER)?
        .into_iter()
        .map(|(line, rec)| {
            let q = LookbackQuote {
                maturity: parse_field(&rec[0], "maturity", line)?,
                price: parse_field(&rec[1], "price", line)?,
                stderr: parse_field(&rec[2], "stderr", line)?,
            };
            if q.price < 0.0 {
                return Err(Error::Parse(format!("row {line}: negative price {}", q.price)));
            }
            Ok(q)
        })
        .collect()
}

/// Lookback reference at maturity `t`.
pub fn lookback_at(quotes: &[LookbackQuote], t: f64) -> Option<LookbackQuote> {
    quotes.iter().find(|q| same_time(q.maturity, t)).copied()
}
