//! Canonical CSV tables. Key columns come first in the order given, value
//! columns follow sorted by name. Reals are written in fixed notation with
//! six significant digits; `Exact` values keep their shortest round-trip form.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use semsim_core::engine::{Metric, StatsReport};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Exact(f64),
    Text(String),
}

impl From<Metric> for Cell {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Int(v) => Cell::Int(v as i64),
            Metric::Real(v) => Cell::Real(v),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => sig6(*v),
            Cell::Exact(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// `v` rounded to six significant digits, without exponent.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}").to_lowercase();
    }
    let sci = format!("{:.5e}", v.abs());
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut s = if exp >= 5 {
        format!("{digits}{}", "0".repeat((exp - 5) as usize))
    } else if exp < 0 {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    } else {
        let (a, b) = digits.split_at(exp as usize + 1);
        format!("{a}.{b}")
    };
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if v < 0.0 {
        s.insert(0, '-');
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    keys: Vec<String>,
    rows: Vec<BTreeMap<String, Cell>>,
}

impl Table {
    pub fn new(keys: &[&str]) -> Self {
        Table { keys: keys.iter().map(|k| k.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: BTreeMap<String, Cell>) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[BTreeMap<String, Cell>] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut vals: Vec<&String> =
            self.rows.iter().flat_map(|r| r.keys()).filter(|k| !self.keys.contains(k)).collect();
        vals.sort();
        vals.dedup();
        self.keys.iter().cloned().chain(vals.into_iter().cloned()).collect()
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let cols = self.columns();
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(&cols)?;
        for r in &self.rows {
            out.write_record(cols.iter().map(|c| r.get(c).map(Cell::render).unwrap_or_default()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            bail!("no rows to write to {}", path.display());
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.to_csv()).with_context(|| format!("writing {}", path.display()))
    }

    /// Values of column `name` as numbers, skipping rows without it.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match r.get(name)? {
                Cell::Int(v) => Some(*v as f64),
                Cell::Real(v) | Cell::Exact(v) => Some(*v),
                Cell::Text(t) => t.parse().ok(),
            })
            .collect()
    }
}

pub fn stats_row(st: &StatsReport) -> BTreeMap<String, Cell> {
    st.columns().into_iter().map(|(k, v)| (k, v.into())).collect()
}
