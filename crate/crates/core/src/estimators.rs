//! Group treatment-effect estimator and the weight diagnostics around it.

use thiserror::Error;

use crate::data::EvalRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("group is empty")]
    EmptyGroup,
    #[error("all importance weights are zero")]
    DegenerateWeights,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("support violation at index {0}: q is zero where p is positive")]
    SupportViolation(usize),
    #[error("{which} sums to {sum}, not 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Running sums sufficient for every per-group quantity used by the loss.
///
/// `d` is the per-record effect term `rho * g - g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub sum_rho: f64,
    pub sum_rho2: f64,
    pub sum_d: f64,
    pub sum_d2: f64,
    pub min_rho: f64,
    pub max_rho: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Self {
            n: 0,
            sum_rho: 0.0,
            sum_rho2: 0.0,
            sum_d: 0.0,
            sum_d2: 0.0,
            min_rho: f64::INFINITY,
            max_rho: f64::NEG_INFINITY,
        }
    }
}

impl Moments {
    #[inline]
    pub fn push(&mut self, r: &EvalRecord) {
        let d = r.effect_term();
        self.n += 1;
        self.min_rho = self.min_rho.min(r.rho);
        self.max_rho = self.max_rho.max(r.rho);
        self.sum_rho += r.rho;
        self.sum_rho2 += r.rho * r.rho;
        self.sum_d += d;
        self.sum_d2 += d * d;
    }

    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a EvalRecord>,
    {
        let mut m = Self::default();
        for r in records {
            m.push(r);
        }
        m
    }

    pub fn t_hat(&self) -> f64 {
        self.sum_d / self.n as f64
    }

    /// `(sum rho)^2 / sum rho^2`, `None` when all weights are zero.
    pub fn ess(&self) -> Option<f64> {
        (self.sum_rho2 > 0.0).then(|| self.sum_rho * self.sum_rho / self.sum_rho2)
    }

    /// `g_inf^2 (1/ESS - 1/n)`, written as `(n S2 - S1^2) / (n S1^2)`; exactly
    /// zero when all weights are equal.
    pub fn v_proxy(&self, g_inf: f64) -> Option<f64> {
        if self.n == 0 || self.sum_rho <= 0.0 {
            return None;
        }
        if self.min_rho == self.max_rho {
            return Some(0.0);
        }
        let n = self.n as f64;
        let s1 = self.sum_rho;
        let excess = (n * self.sum_rho2 - s1 * s1) / (n * s1 * s1);
        Some((g_inf * g_inf * excess).max(0.0))
    }

    /// Unbiased sample variance of the effect terms divided by `n`.
    pub fn v_sample(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let ss = (self.sum_d2 - self.sum_d * self.sum_d / n).max(0.0);
        Some(ss / (n - 1.0) / n)
    }
}

/// Summary of one group of records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub n: usize,
    pub t_hat: f64,
    pub ess: f64,
    pub v_proxy: f64,
    /// `None` for singleton groups.
    pub v_sample: Option<f64>,
}

impl GroupStats {
    pub fn compute(records: &[EvalRecord], g_inf: f64) -> Result<Self, EstimatorError> {
        let t_hat = group_te_estimate(records)?;
        let weights: Vec<f64> = records.iter().map(|r| r.rho).collect();
        Ok(Self {
            n: records.len(),
            t_hat,
            ess: ess(&weights)?,
            v_proxy: variance_upper_bound(records, g_inf)?,
            v_sample: sample_variance_of_mean(records).ok(),
        })
    }
}

/// `(1/n) sum (rho_i g_i - g_i)`.
pub fn group_te_estimate(records: &[EvalRecord]) -> Result<f64, EstimatorError> {
    if records.is_empty() {
        return Err(EstimatorError::EmptyGroup);
    }
    let sum: f64 = records.iter().map(EvalRecord::effect_term).sum();
    Ok(sum / records.len() as f64)
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn ess(weights: &[f64]) -> Result<f64, EstimatorError> {
    if weights.is_empty() {
        return Err(EstimatorError::EmptyGroup);
    }
    let s1: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 <= 0.0 {
        return Err(EstimatorError::DegenerateWeights);
    }
    Ok(s1 * s1 / s2)
}

/// Variance proxy `g_inf^2 (1/ESS - 1/n)` for the group estimator.
pub fn variance_upper_bound(records: &[EvalRecord], g_inf: f64) -> Result<f64, EstimatorError> {
    if records.is_empty() {
        return Err(EstimatorError::EmptyGroup);
    }
    Moments::from_records(records)
        .v_proxy(g_inf)
        .ok_or(EstimatorError::DegenerateWeights)
}

/// `s^2 / n` with the unbiased (n-1) sample variance of the effect terms.
pub fn sample_variance_of_mean(records: &[EvalRecord]) -> Result<f64, EstimatorError> {
    let n = records.len();
    if n < 2 {
        return Err(EstimatorError::TooFewSamples(n));
    }
    let mean = group_te_estimate(records)?;
    let ss: f64 = records
        .iter()
        .map(|r| {
            let d = r.effect_term() - mean;
            d * d
        })
        .sum();
    Ok(ss / (n as f64 - 1.0) / n as f64)
}

/// Weighted importance sampling value `sum rho g / sum rho`.
pub fn wis_value(records: &[EvalRecord]) -> Result<f64, EstimatorError> {
    let s: f64 = records.iter().map(|r| r.rho).sum();
    if s <= 0.0 {
        return Err(EstimatorError::DegenerateWeights);
    }
    Ok(records.iter().map(|r| r.rho * r.g).sum::<f64>() / s)
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// Exponentiated order-2 Renyi divergence `sum_x q(x) (p(x)/q(x))^2`.
pub fn renyi_d2(p: &[f64], q: &[f64]) -> Result<f64, EstimatorError> {
    if p.len() != q.len() {
        return Err(EstimatorError::LengthMismatch(p.len(), q.len()));
    }
    for (which, dist) in [("p", p), ("q", q)] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || dist.iter().any(|v| *v < 0.0) {
            return Err(EstimatorError::NotNormalized { which, sum });
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(EstimatorError::SupportViolation(i));
            }
            total += pi * pi / qi;
        }
    }
    Ok(total)
}
