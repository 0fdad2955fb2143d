use std::path::Path;

use serde::Serialize;

use super::pipeline::{estimate, fit, records, Environment};
use super::{ExperimentConfig, HarnessError, Variant};
use crate::inference::{compute_metrics, GroupEstimate, MetricsReport};
use crate::par;
use crate::seed::{self, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One `(variant, horizon, seed)` result.
#[derive(Debug, Clone)]
pub struct CellRow {
    pub variant: Variant,
    pub horizon: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub error: String,
    pub metrics: Option<MetricsReport>,
    /// Leaves whose interval contains the true group effect.
    pub covered: usize,
    /// Per-leaf estimates paired with the true group effect.
    pub groups: Vec<(GroupEstimate, f64)>,
}

impl CellRow {
    fn failed(variant: Variant, horizon: usize, seed: u64, err: &HarnessError) -> Self {
        Self {
            variant,
            horizon,
            seed,
            status: CellStatus::Failed,
            error: err.to_string(),
            metrics: None,
            covered: 0,
            groups: Vec::new(),
        }
    }
}

/// Mean and standard error over the successful seeds of one
/// `(variant, horizon)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub variant: Variant,
    pub horizon: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub individual_mse_mean: f64,
    pub individual_mse_se: f64,
    pub group_mse_mean: f64,
    pub group_mse_se: f64,
    pub coverage_mean: f64,
    pub coverage_se: f64,
    pub mean_ci_width_mean: f64,
    pub mean_ci_width_se: f64,
    pub n_groups_mean: f64,
    pub n_groups_se: f64,
    /// Covered leaves over all leaves, pooled across seeds.
    pub pooled_coverage: f64,
}

type VariantOutcome = (MetricsReport, usize, Vec<(GroupEstimate, f64)>);

fn run_variant(
    variant: Variant,
    data: &crate::data::Dataset,
    cfg: &ExperimentConfig,
    cell_seed: u64,
    test_points: &[(Vec<f64>, f64)],
    truth: &super::GroundTruth,
) -> Result<VariantOutcome, HarnessError> {
    let fitted = fit(data, cfg, &variant.loss(&cfg.loss), cell_seed)?;
    let estimates = estimate(data, &fitted.tree, cfg, cell_seed)?;
    let group_truth = truth.group_truth(&fitted.tree)?;
    let metrics = compute_metrics(&estimates, &fitted.tree, test_points, &group_truth)?;
    let groups: Vec<(GroupEstimate, f64)> = estimates
        .into_iter()
        .map(|e| {
            let t = group_truth.iter().find(|(l, _)| *l == e.leaf).map_or(f64::NAN, |(_, t)| *t);
            (e, t)
        })
        .collect();
    let covered = groups.iter().filter(|(e, t)| e.ci_low <= *t && *t <= e.ci_high).count();
    Ok((metrics, covered, groups))
}

fn run_cell(cfg: &ExperimentConfig, horizon: usize, seed: u64) -> Vec<CellRow> {
    let cell_seed = seed::derive(seed, &[stage::CELL, horizon as u64]);
    let env_cfg = cfg.env.with_horizon(horizon);
    let shared = (|| {
        let env = Environment::build(&env_cfg)?;
        let trajs = env.simulate(env_cfg.n(), seed::child(cell_seed, stage::SIMULATE))?;
        let data = records(&trajs, env.gamma())?;
        let test_points = env.test_points(&cfg.oracle, cell_seed)?;
        let truth = env.ground_truth(&cfg.oracle, cell_seed)?;
        Ok::<_, HarnessError>((data, test_points, truth))
    })();
    cfg.variants
        .iter()
        .map(|&variant| {
            let outcome = shared.as_ref().map_err(|e| HarnessError::Config {
                field: "env".into(),
                message: e.to_string(),
            });
            match outcome.and_then(|(data, tp, truth)| run_variant(variant, data, cfg, cell_seed, tp, truth)) {
                Ok((metrics, covered, groups)) => CellRow {
                    variant,
                    horizon,
                    seed,
                    status: CellStatus::Ok,
                    error: String::new(),
                    metrics: Some(metrics),
                    covered,
                    groups,
                },
                Err(e) => CellRow::failed(variant, horizon, seed, &e),
            }
        })
        .collect()
}

/// Runs every `(horizon, seed)` cell, each for all configured variants on a
/// shared dataset. Rows come back sorted by `(variant, horizon, seed)`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Vec<CellRow> {
    let cells: Vec<(usize, u64)> = cfg
        .horizon_list()
        .into_iter()
        .flat_map(|h| cfg.seed_list().into_iter().map(move |s| (h, s)))
        .collect();
    let mut rows: Vec<CellRow> = par::map_slice(&cells, |&(h, s)| run_cell(cfg, h, s)).into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.variant, r.horizon, r.seed));
    rows
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

/// Groups rows by `(variant, horizon)`; failed cells are counted but excluded
/// from the means.
pub fn aggregate(rows: &[CellRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Variant, usize)> = rows.iter().map(|r| (r.variant, r.horizon)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(variant, horizon)| {
            let cell: Vec<&CellRow> = rows.iter().filter(|r| r.variant == variant && r.horizon == horizon).collect();
            let ok: Vec<(&CellRow, &MetricsReport)> = cell.iter().filter_map(|r| r.metrics.as_ref().map(|m| (*r, m))).collect();
            let col = |f: fn(&MetricsReport) -> f64| mean_se(&ok.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
            let (individual_mse_mean, individual_mse_se) = col(|m| m.individual_mse);
            let (group_mse_mean, group_mse_se) = col(|m| m.group_mse);
            let (coverage_mean, coverage_se) = col(|m| m.coverage);
            let (mean_ci_width_mean, mean_ci_width_se) = col(|m| m.mean_ci_width);
            let (n_groups_mean, n_groups_se) = col(|m| m.n_groups as f64);
            let leaves: usize = ok.iter().map(|(r, _)| r.groups.len()).sum();
            let covered: usize = ok.iter().map(|(r, _)| r.covered).sum();
            AggregateRow {
                variant,
                horizon,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                individual_mse_mean,
                individual_mse_se,
                group_mse_mean,
                group_mse_se,
                coverage_mean,
                coverage_se,
                mean_ci_width_mean,
                mean_ci_width_se,
                n_groups_mean,
                n_groups_se,
                pooled_coverage: if leaves == 0 { f64::NAN } else { covered as f64 / leaves as f64 },
            }
        })
        .collect()
}

fn cell_file(r: &CellRow) -> String {
    format!("{}_h{}_s{}.csv", r.variant.name(), r.horizon, r.seed)
}

/// Runs the sweep and writes `config.json`, `cells/*.csv`, `metrics.csv` and
/// `aggregate.csv` under `out_dir`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Vec<CellRow>, Vec<AggregateRow>), HarnessError> {
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json() + "\n")?;

    let rows = run_sweep(cfg);
    for r in rows.iter().filter(|r| r.status == CellStatus::Ok) {
        let mut w = csv::Writer::from_path(cells_dir.join(cell_file(r)))?;
        w.write_record(["leaf", "n", "t_hat", "ci_low", "ci_high", "ess", "v_proxy", "t_true", "rule"])?;
        for (e, t) in &r.groups {
            w.write_record([
                e.leaf.to_string(),
                e.n.to_string(),
                e.t_hat.to_string(),
                e.ci_low.to_string(),
                e.ci_high.to_string(),
                e.ess.to_string(),
                e.v_proxy.to_string(),
                t.to_string(),
                e.rule.clone(),
            ])?;
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    w.write_record([
        "variant",
        "horizon",
        "seed",
        "status",
        "error",
        "individual_mse",
        "group_mse",
        "coverage",
        "mean_ci_width",
        "n_groups",
        "covered",
    ])?;
    for r in &rows {
        let status = match r.status {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
        };
        let mut rec = vec![
            r.variant.name().to_string(),
            r.horizon.to_string(),
            r.seed.to_string(),
            status.to_string(),
            r.error.clone(),
        ];
        match &r.metrics {
            Some(m) => rec.extend([
                m.individual_mse.to_string(),
                m.group_mse.to_string(),
                m.coverage.to_string(),
                m.mean_ci_width.to_string(),
                m.n_groups.to_string(),
                r.covered.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let agg = aggregate(&rows);
    let mut w = csv::Writer::from_path(out_dir.join("aggregate.csv"))?;
    for a in &agg {
        w.serialize(a)?;
    }
    w.flush()?;
    Ok((rows, agg))
}
