//! Estimation phase: per-leaf effects with percentile bootstrap intervals,
//! and the evaluation metrics used by the ablation harness.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, EvalRecord};
use crate::estimators::{group_te_estimate, Moments};
use crate::par;
use crate::seed;
use crate::tree::{Tree, TreeError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("group is empty")]
    EmptyGroup,
    #[error("leaves without estimation records: {0:?}")]
    EmptyLeaves(Vec<usize>),
    #[error("leaves whose estimation weights are all zero: {0:?}")]
    DegenerateLeaves(Vec<usize>),
    #[error("no ground truth for leaf {0}")]
    MissingTruth(usize),
    #[error("invalid bootstrap setting: {0}")]
    InvalidSetting(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEstimate {
    pub leaf: usize,
    pub n: usize,
    pub t_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ess: f64,
    pub v_proxy: f64,
    pub rule: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub individual_mse: f64,
    pub group_mse: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    pub n_groups: usize,
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the group estimator. Replicate `b` draws
/// with replacement from a generator seeded by `child(seed, b)`.
pub fn bootstrap_ci(records: &[EvalRecord], b: usize, level: f64, seed: u64) -> Result<(f64, f64), InferenceError> {
    if records.is_empty() {
        return Err(InferenceError::EmptyGroup);
    }
    if b == 0 {
        return Err(InferenceError::InvalidSetting("B must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidSetting(format!("level {level} outside (0, 1)")));
    }
    let terms: Vec<f64> = records.iter().map(EvalRecord::effect_term).collect();
    let n = terms.len();
    let mut reps = par::map_range(b, |rep| {
        let mut rng = seed::rng(seed::child(seed, rep as u64));
        let sum: f64 = (0..n).map(|_| terms[rng.random_range(0..n)]).sum();
        sum / n as f64
    });
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&reps, tail), quantile_sorted(&reps, 1.0 - tail)))
}

/// Routes estimation records to leaves, in leaf-id order.
pub fn group_by_leaf(tree: &Tree, ds: &Dataset) -> Result<Vec<Vec<EvalRecord>>, InferenceError> {
    let mut groups = vec![Vec::new(); tree.leaf_count()];
    for r in ds.records() {
        groups[tree.assign_leaf(&r.x)?].push(r.clone());
    }
    Ok(groups)
}

/// One estimate per leaf from the held-out estimation set. Leaf `l` uses
/// bootstrap seed `child(seed, l)`.
pub fn estimate_groups(
    tree: &Tree,
    est: &Dataset,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<GroupEstimate>, InferenceError> {
    estimate_groups_with_scale(tree, est, b, level, seed, est.g_inf())
}

/// [`estimate_groups`] with the return scale of the variance proxy given
/// explicitly.
pub fn estimate_groups_with_scale(
    tree: &Tree,
    est: &Dataset,
    b: usize,
    level: f64,
    seed: u64,
    g_inf: f64,
) -> Result<Vec<GroupEstimate>, InferenceError> {
    if est.m() != tree.m() && !est.is_empty() {
        return Err(TreeError::DimensionMismatch {
            expected: tree.m(),
            found: est.m(),
        }
        .into());
    }
    let groups = group_by_leaf(tree, est)?;
    let empty: Vec<usize> = (0..groups.len()).filter(|&l| groups[l].is_empty()).collect();
    if !empty.is_empty() {
        return Err(InferenceError::EmptyLeaves(empty));
    }
    let moments: Vec<Moments> = groups.iter().map(Moments::from_records).collect();
    let degenerate: Vec<usize> = (0..groups.len()).filter(|&l| moments[l].ess().is_none()).collect();
    if !degenerate.is_empty() {
        return Err(InferenceError::DegenerateLeaves(degenerate));
    }
    let rules = tree.leaf_rules();
    groups
        .iter()
        .enumerate()
        .map(|(leaf, records)| {
            let m = &moments[leaf];
            let (ci_low, ci_high) = bootstrap_ci(records, b, level, seed::child(seed, leaf as u64))?;
            Ok(GroupEstimate {
                leaf,
                n: m.n,
                t_hat: group_te_estimate(records).map_err(|_| InferenceError::EmptyGroup)?,
                ci_low,
                ci_high,
                ess: m.ess().unwrap_or_default(),
                v_proxy: m.v_proxy(g_inf).unwrap_or_default(),
                rule: rules[leaf].clone(),
            })
        })
        .collect()
}

/// Scores leaf estimates against ground truth.
///
/// `test_points` are `(x, t_true)` pairs; `group_truth` maps leaf id to the
/// true group effect.
pub fn compute_metrics(
    estimates: &[GroupEstimate],
    tree: &Tree,
    test_points: &[(Vec<f64>, f64)],
    group_truth: &[(usize, f64)],
) -> Result<MetricsReport, InferenceError> {
    let by_leaf: BTreeMap<usize, &GroupEstimate> = estimates.iter().map(|e| (e.leaf, e)).collect();
    let truth: BTreeMap<usize, f64> = group_truth.iter().copied().collect();

    let mut sq = 0.0;
    for (x, t_true) in test_points {
        let leaf = tree.assign_leaf(x)?;
        let est = by_leaf.get(&leaf).ok_or(InferenceError::MissingTruth(leaf))?;
        sq += (t_true - est.t_hat).powi(2);
    }
    let individual_mse = if test_points.is_empty() {
        0.0
    } else {
        sq / test_points.len() as f64
    };

    let mut group_sq = 0.0;
    let mut covered = 0usize;
    let mut width = 0.0;
    for e in estimates {
        let t = *truth.get(&e.leaf).ok_or(InferenceError::MissingTruth(e.leaf))?;
        group_sq += (t - e.t_hat).powi(2);
        if e.ci_low <= t && t <= e.ci_high {
            covered += 1;
        }
        width += e.ci_high - e.ci_low;
    }
    let g = estimates.len().max(1) as f64;
    Ok(MetricsReport {
        individual_mse,
        group_mse: group_sq / g,
        coverage: covered as f64 / g,
        mean_ci_width: width / g,
        n_groups: tree.leaf_count(),
    })
}

pub fn write_group_csv<W: Write>(w: W, estimates: &[GroupEstimate]) -> Result<(), InferenceError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["leaf", "n", "t_hat", "ci_low", "ci_high", "ess", "v_proxy", "rule"])?;
    for e in estimates {
        out.write_record([
            e.leaf.to_string(),
            e.n.to_string(),
            e.t_hat.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
            e.ess.to_string(),
            e.v_proxy.to_string(),
            e.rule.clone(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(w: W, m: &MetricsReport) -> Result<(), InferenceError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["individual_mse", "group_mse", "coverage", "mean_ci_width", "n_groups"])?;
    out.write_record([
        m.individual_mse.to_string(),
        m.group_mse.to_string(),
        m.coverage.to_string(),
        m.mean_ci_width.to_string(),
        m.n_groups.to_string(),
    ])?;
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Node;

    fn stump() -> Tree {
        Tree::from_root(
            Node::Internal {
                feature: 0,
                threshold: 0.5,
                left: Box::new(Node::Leaf { id: 0 }),
                right: Box::new(Node::Leaf { id: 0 }),
            },
            1,
        )
    }

    fn estimate(leaf: usize, t_hat: f64, lo: f64, hi: f64) -> GroupEstimate {
        GroupEstimate {
            leaf,
            n: 10,
            t_hat,
            ci_low: lo,
            ci_high: hi,
            ess: 10.0,
            v_proxy: 0.0,
            rule: String::new(),
        }
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn bootstrap_identical_records_zero_width() {
        let recs = vec![EvalRecord::new(vec![0.0], 2.0, 0.5); 30];
        let (lo, hi) = bootstrap_ci(&recs, 200, 0.95, 3).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));
    }

    #[test]
    fn bootstrap_is_deterministic_and_ordered() {
        let recs: Vec<_> = (0..50).map(|i| EvalRecord::new(vec![0.0], 0.5 + (i % 7) as f64 * 0.2, (i % 5) as f64 - 2.0)).collect();
        let a = bootstrap_ci(&recs, 300, 0.9, 17).unwrap();
        let b = bootstrap_ci(&recs, 300, 0.9, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.0 <= a.1);
        assert!(matches!(bootstrap_ci(&[], 10, 0.9, 0), Err(InferenceError::EmptyGroup)));
    }

    #[test]
    fn estimate_single_leaf_null_effect() {
        let ds = Dataset::new((0..20).map(|i| EvalRecord::new(vec![i as f64], 1.0, i as f64 * 0.1)).collect()).unwrap();
        let est = estimate_groups(&Tree::single_leaf(1), &ds, 100, 0.95, 1).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].t_hat, 0.0);
        assert_eq!((est[0].ci_low, est[0].ci_high), (0.0, 0.0));
        assert_eq!(est[0].v_proxy, 0.0);
        assert_eq!(est[0].ess, 20.0);
        assert_eq!(est[0].rule, "all");
    }

    #[test]
    fn estimate_two_groups_and_empty_leaf() {
        let recs: Vec<_> = (0..20)
            .map(|i| {
                let x = i as f64 / 20.0;
                EvalRecord::new(vec![x], 2.0, if x <= 0.5 { 1.0 } else { -1.0 })
            })
            .collect();
        let est = estimate_groups(&stump(), &Dataset::new(recs).unwrap(), 50, 0.95, 9).unwrap();
        assert_eq!(est[0].t_hat, 1.0);
        assert_eq!(est[1].t_hat, -1.0);
        assert_eq!(est[1].rule, "x0 > 0.5");

        let left_only = Dataset::new(vec![EvalRecord::new(vec![0.1], 1.0, 1.0)]).unwrap();
        assert!(matches!(
            estimate_groups(&stump(), &left_only, 10, 0.95, 0),
            Err(InferenceError::EmptyLeaves(v)) if v == vec![1]
        ));
    }

    #[test]
    fn metrics_examples() {
        let single = Tree::single_leaf(1);
        let perfect = compute_metrics(&[estimate(0, 1.0, 0.5, 1.5)], &single, &[(vec![0.0], 1.0)], &[(0, 1.0)]).unwrap();
        assert_eq!((perfect.individual_mse, perfect.group_mse, perfect.coverage), (0.0, 0.0, 1.0));

        let m = compute_metrics(&[estimate(0, 0.0, -1.0, 1.0)], &single, &[], &[(0, 2.0)]).unwrap();
        assert_eq!((m.group_mse, m.coverage, m.mean_ci_width, m.n_groups), (4.0, 0.0, 2.0, 1));

        let m = compute_metrics(
            &[estimate(0, 0.0, -1.0, 1.0)],
            &single,
            &[(vec![0.0], 1.0), (vec![1.0], -3.0)],
            &[(0, 0.0)],
        )
        .unwrap();
        assert_eq!(m.individual_mse, 5.0);

        assert!(matches!(
            compute_metrics(&[estimate(0, 0.0, -1.0, 1.0)], &single, &[], &[]),
            Err(InferenceError::MissingTruth(0))
        ));
    }

    #[test]
    fn coverage_and_width_ignore_leaf_labels() {
        let tree = stump();
        let a = [estimate(0, 1.0, 0.0, 2.0), estimate(1, -1.0, -1.5, -0.9)];
        let b = [estimate(1, 1.0, 0.0, 2.0), estimate(0, -1.0, -1.5, -0.9)];
        let ma = compute_metrics(&a, &tree, &[], &[(0, 1.5), (1, 0.0)]).unwrap();
        let mb = compute_metrics(&b, &tree, &[], &[(1, 1.5), (0, 0.0)]).unwrap();
        assert_eq!(ma.coverage, mb.coverage);
        assert_eq!(ma.mean_ci_width, mb.mean_ci_width);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_group_csv(&mut buf, &[estimate(0, 0.25, 0.0, 0.5)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("leaf,n,t_hat,ci_low,ci_high,ess,v_proxy,rule\n0,10,0.25,0,0.5,10,0,"));
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &MetricsReport {
            individual_mse: 1.0,
            group_mse: 2.0,
            coverage: 0.5,
            mean_ci_width: 0.1,
            n_groups: 3,
        })
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "individual_mse,group_mse,coverage,mean_ci_width,n_groups\n1,2,0.5,0.1,3\n"
        );
    }
}
