//! Trajectories, evaluation records and sample splitting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("support violation in trajectory `{id}` at step {step}: behavior probability {prob} is not positive")]
    SupportViolation { id: String, step: usize, prob: f64 },
    #[error("mixed feature widths: expected {expected}, found {found} (record {index})")]
    MixedWidth {
        expected: usize,
        found: usize,
        index: usize,
    },
    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One logged episode. Only the initial-state features are used for grouping;
/// the per-step arrays carry the taken action, its reward and the probability
/// each policy assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub x0: Vec<f64>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub b_probs: Vec<f64>,
    pub e_probs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks the per-step array invariants. Returns the offending field name.
    fn check_shape(&self) -> Result<(), (&'static str, String)> {
        let n = self.actions.len();
        for (field, len) in [
            ("rewards", self.rewards.len()),
            ("b_probs", self.b_probs.len()),
            ("e_probs", self.e_probs.len()),
        ] {
            if len != n {
                return Err((
                    field,
                    format!("length {len} differs from actions length {n}"),
                ));
            }
        }
        if let Some(r) = self.rewards.iter().find(|r| !r.is_finite()) {
            return Err(("rewards", format!("non-finite reward {r}")));
        }
        if let Some(p) = self.b_probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(("b_probs", format!("behavior probability {p} is not positive")));
        }
        if let Some(p) = self.e_probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(("e_probs", format!("evaluation probability {p} is negative")));
        }
        if let Some(v) = self.x0.iter().find(|v| !v.is_finite()) {
            return Err(("x0", format!("non-finite feature {v}")));
        }
        Ok(())
    }
}

/// `(x, rho, g)`: initial features, importance ratio and discounted return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub x: Vec<f64>,
    pub rho: f64,
    pub g: f64,
}

impl EvalRecord {
    pub fn new(x: Vec<f64>, rho: f64, g: f64) -> Self {
        Self { x, rho, g }
    }

    /// `rho * g - g`, the per-record term of the group estimator.
    #[inline]
    pub fn effect_term(&self) -> f64 {
        self.rho * self.g - self.g
    }
}

/// Records sharing a feature width, with the cached sup-norm of the returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<EvalRecord>,
    m: usize,
    g_inf: f64,
}

impl Dataset {
    /// Validates widths and finiteness. An empty list yields `m = 0`.
    pub fn new(records: Vec<EvalRecord>) -> Result<Self, DataError> {
        let m = records.first().map_or(0, |r| r.x.len());
        Self::with_width(records, m)
    }

    pub fn with_width(records: Vec<EvalRecord>, m: usize) -> Result<Self, DataError> {
        let mut g_inf = 0.0f64;
        for (index, r) in records.iter().enumerate() {
            if r.x.len() != m {
                return Err(DataError::MixedWidth {
                    expected: m,
                    found: r.x.len(),
                    index,
                });
            }
            if !(r.rho.is_finite() && r.rho >= 0.0) {
                return Err(DataError::InvalidRecord {
                    index,
                    reason: format!("rho = {}", r.rho),
                });
            }
            if !r.g.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidRecord {
                    index,
                    reason: "non-finite return or feature".into(),
                });
            }
            g_inf = g_inf.max(r.g.abs());
        }
        Ok(Self { records, m, g_inf })
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EvalRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Feature count.
    pub fn m(&self) -> usize {
        self.m
    }

    /// `max_i |g_i|`, zero for an empty dataset.
    pub fn g_inf(&self) -> f64 {
        self.g_inf
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in &traj.rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// `prod_t e_t / b_t` over the taken actions.
pub fn importance_ratio(traj: &Trajectory) -> Result<f64, DataError> {
    let mut rho = 1.0;
    for (step, (&e, &b)) in traj.e_probs.iter().zip(&traj.b_probs).enumerate() {
        if b <= 0.0 || b.is_nan() {
            return Err(DataError::SupportViolation {
                id: traj.id.clone(),
                step,
                prob: b,
            });
        }
        rho *= e / b;
    }
    Ok(rho)
}

/// One record per trajectory, in order.
pub fn to_records(trajs: &[Trajectory], gamma: f64) -> Result<Dataset, DataError> {
    let m = trajs.first().map_or(0, |t| t.x0.len());
    let mut records = Vec::with_capacity(trajs.len());
    for (index, t) in trajs.iter().enumerate() {
        if t.x0.len() != m {
            return Err(DataError::MixedWidth {
                expected: m,
                found: t.x0.len(),
                index,
            });
        }
        let rho = importance_ratio(t)?;
        records.push(EvalRecord::new(t.x0.clone(), rho, discounted_return(t, gamma)));
    }
    Dataset::with_width(records, m)
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, line: usize, name: &str) -> Result<&'a Value, DataError> {
    obj.get(name)
        .ok_or_else(|| schema(line, name, "missing field"))
}

fn f64_array(obj: &serde_json::Map<String, Value>, line: usize, name: &str) -> Result<Vec<f64>, DataError> {
    let arr = field(obj, line, name)?
        .as_array()
        .ok_or_else(|| schema(line, name, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .ok_or_else(|| schema(line, name, format!("element {i} is not a number")))
        })
        .collect()
}

fn parse_trajectory(text: &str, line: usize) -> Result<Trajectory, DataError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DataError::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema(line, "<root>", "expected a JSON object"))?;
    let id = field(obj, line, "id")?
        .as_str()
        .ok_or_else(|| schema(line, "id", "expected a string"))?
        .to_string();
    let actions = field(obj, line, "actions")?
        .as_array()
        .ok_or_else(|| schema(line, "actions", "expected an array of integers"))?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .and_then(|a| u32::try_from(a).ok())
                .ok_or_else(|| schema(line, "actions", format!("element {i} is not a non-negative integer")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let traj = Trajectory {
        id,
        x0: f64_array(obj, line, "x0")?,
        actions,
        rewards: f64_array(obj, line, "rewards")?,
        b_probs: f64_array(obj, line, "b_probs")?,
        e_probs: f64_array(obj, line, "e_probs")?,
    };
    traj.check_shape()
        .map_err(|(field, message)| schema(line, field, message))?;
    Ok(traj)
}

/// Reads one trajectory per non-blank line. Line numbers in errors are 1-based.
/// The `x0` width must be constant across the file.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = parse_trajectory(&line, i + 1)?;
        if let Some(first) = out.first() {
            if first.x0.len() != traj.x0.len() {
                return Err(schema(
                    i + 1,
                    "x0",
                    format!("width {} differs from {} on earlier lines", traj.x0.len(), first.x0.len()),
                ));
            }
        }
        out.push(traj);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<(), DataError> {
    for t in trajs {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

/// Number of records in the first part: `round(fraction * n)`, halves rounded up.
pub fn split_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 0.5).floor().min(n as f64) as usize
}

/// Uniform random permutation, then the first `split_size` records form the
/// first part. Each part recomputes its own `g_inf`.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let k = split_size(n, fraction);
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.records[i].clone()).collect::<Vec<_>>();
    let first = Dataset::with_width(pick(&order[..k]), ds.m)?;
    let second = Dataset::with_width(pick(&order[k..]), ds.m)?;
    Ok((first, second))
}
