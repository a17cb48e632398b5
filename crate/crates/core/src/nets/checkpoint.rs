//! Plain-text key/value checkpoints.
//!
//! One `key = value` entry per line, UTF-8, keys unique and kept in insertion
//! order. Reals are written with 17 significant digits so a write/read cycle
//! reproduces every bit.

use std::fs;
use std::path::Path;

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &str = "# nsde checkpoint v1";

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, key: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("entry {key}: {s:?} is not a number")))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Inserts or replaces an entry.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        assert!(
            !key.is_empty() && !key.contains(['=', '\n', ' ']),
            "invalid checkpoint key {key:?}"
        );
        let value = value.into();
        assert!(!value.contains('\n'), "checkpoint values are single-line");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no entry {key}")))
    }

    pub fn set_f64(&mut self, key: &str, v: f64) {
        self.set(key, format_f64(v));
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.require(key)?, key)
    }

    pub fn set_f64s(&mut self, key: &str, vs: &[f64]) {
        let s: Vec<String> = vs.iter().map(|&v| format_f64(v)).collect();
        self.set(key, s.join(","));
    }

    pub fn get_f64s(&self, key: &str) -> Result<Vec<f64>> {
        let s = self.require(key)?;
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| parse_f64(p, key)).collect()
    }

    pub fn set_usizes(&mut self, key: &str, vs: &[usize]) {
        let s: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
        self.set(key, s.join(","));
    }

    pub fn get_usizes(&self, key: &str) -> Result<Vec<usize>> {
        let s = self.require(key)?;
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("entry {key}: {p:?} is not a count")))
            })
            .collect()
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let s = self.require(key)?;
        s.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("entry {key}: {s:?} is not an integer")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)?.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Parse(format!("entry {key}: {other:?} is not a boolean"))),
        }
    }

    /// Stores every parameter as `param.<prefix>.<name> = rows,cols,v0,v1,...`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            let m = store.value(id);
            let mut parts = vec![m.rows().to_string(), m.cols().to_string()];
            parts.extend(m.as_slice().iter().map(|&v| format_f64(v)));
            self.set(&format!("param.{prefix}.{}", store.name(id)), parts.join(","));
        }
    }

    /// Rebuilds a store from the `param.<prefix>.*` entries, in file order.
    pub fn params(&self, prefix: &str) -> Result<ParamStore> {
        let head = format!("param.{prefix}.");
        let mut store = ParamStore::new();
        for (k, v) in &self.entries {
            let Some(name) = k.strip_prefix(&head) else { continue };
            let mut it = v.split(',');
            let mut dim = || -> Result<usize> {
                it.next()
                    .and_then(|p| p.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("entry {k}: bad shape")))
            };
            let (rows, cols) = (dim()?, dim()?);
            let data = it.map(|p| parse_f64(p, k)).collect::<Result<Vec<_>>>()?;
            let m = Matrix::new(rows, cols, data)
                .map_err(|_| Error::Parse(format!("entry {k}: value count does not match shape")))?;
            store.add(name, m)?;
        }
        Ok(store)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::Parse("not a checkpoint document".into()));
        }
        let mut cp = Checkpoint::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 2)))?;
            if cp.get(k).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key {k}", n + 2)));
            }
            cp.entries.push((k.to_string(), v.to_string()));
        }
        Ok(cp)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_foreign_documents() {
        assert!(Checkpoint::parse("hello = 1\n").is_err());
        assert!(Checkpoint::parse(&format!("{MAGIC}\nnot an entry\n")).is_err());
        assert!(Checkpoint::parse(&format!("{MAGIC}\na = 1\na = 2\n")).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut s = ParamStore::new();
        s.add("a.w0", Matrix::new(2, 3, vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0, f64::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        s.add("a.b0", Matrix::row(vec![std::f64::consts::PI])).unwrap();
        let mut cp = Checkpoint::new();
        cp.put_params("model", &s);
        let back = Checkpoint::parse(&cp.to_text()).unwrap().params("model").unwrap();
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            let other = back.find(s.name(id)).unwrap();
            let (x, y) = (s.value(id), back.value(other));
            assert_eq!(x.shape(), y.shape());
            for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn reals_round_trip_bit_exact(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let mut cp = Checkpoint::new();
            cp.set_f64("x", v);
            cp.set_f64s("xs", &[v, -v]);
            let back = Checkpoint::parse(&cp.to_text()).unwrap();
            prop_assert_eq!(back.get_f64("x").unwrap().to_bits(), v.to_bits());
            let xs = back.get_f64s("xs").unwrap();
            prop_assert_eq!(xs[1].to_bits(), (-v).to_bits());
        }
    }
}
