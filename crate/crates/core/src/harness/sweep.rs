//! One full protocol run per value of a single config axis.

use std::fmt;
use std::str::FromStr;

use crate::error::{G2gError, Result};

use super::config::Config;
use super::dataset::EmbeddingDataset;
use super::eval::Metrics;
use super::run::run_protocol;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Segments,
    Lambda,
    Eta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Segments => "S",
            Axis::Lambda => "lambda",
            Axis::Eta => "eta",
        }
    }

    /// `cfg` with this axis set to `value`, validated.
    pub fn apply(self, cfg: &Config, value: f64) -> Result<Config> {
        let mut c = cfg.clone();
        match self {
            Axis::Segments => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(G2gError::Config(format!("S must be a positive integer, got {value}")));
                }
                c.segments = value as usize;
            }
            Axis::Lambda => c.lambda = value,
            Axis::Eta => c.eta = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = G2gError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" | "segments" => Ok(Axis::Segments),
            "lambda" | "λ" => Ok(Axis::Lambda),
            "eta" | "η" => Ok(Axis::Eta),
            other => Err(G2gError::Config(format!("unknown sweep axis {other:?}; expected S, lambda or eta"))),
        }
    }
}

/// Parses `v1,v2,...`.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let vals = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| G2gError::Config(format!("sweep value {v:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(G2gError::Config("sweep needs at least one value".into()));
    }
    Ok(vals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: Axis,
    pub rows: Vec<(f64, Metrics)>,
}

impl SweepTable {
    /// `<axis>,acc_0..acc_{n-1},average,pd`, accuracies in percent.
    pub fn to_csv(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.1.accuracies.len());
        let mut o = self.axis.name().to_string();
        (0..n).for_each(|i| o.push_str(&format!(",acc_{i}")));
        o.push_str(",average,pd\n");
        for (v, m) in &self.rows {
            o.push_str(&format!("{v}"));
            m.accuracies.iter().for_each(|a| o.push_str(&format!(",{a:.4}")));
            o.push_str(&format!(",{:.4},{:.4}\n", m.average, m.pd));
        }
        o
    }
}

/// Validates every value before running any, then runs the protocol once
/// per value with the config's seed.
pub fn sweep(
    cfg: &Config,
    axis: Axis,
    values: &[f64],
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(G2gError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = axis.apply(cfg, v)?;
            train.check_segments(c.segments)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (&v, c) in values.iter().zip(&configs) {
        rows.push((v, run_protocol(c, train, test)?.metrics));
    }
    Ok(SweepTable { axis, rows })
}
