use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use serde_json::json;

use super::{ExperimentConfig, HarnessError, OracleConfig};
use crate::data::{self, Dataset, Trajectory};
use crate::envs::tabular::{group_effect_from, sample_index, simulate as simulate_tabular, treatment_effects};
use crate::envs::toy::{self, toy_generate, toy_oracle};
use crate::envs::{EnvConfig, EnvKind, Surrogate, ToyConfig};
use crate::inference::{self, GroupEstimate};
use crate::loss::{giope_loss, LabeledPartition, LossConfig};
use crate::par;
use crate::seed::{self, stage};
use crate::tree::{build_tree_with_scale, SplitRecord, Tree, TreeError};

/// A built environment ready to simulate and score.
#[derive(Debug, Clone)]
pub enum Environment {
    Toy(ToyConfig),
    Tabular(Box<Surrogate>),
}

impl Environment {
    pub fn build(cfg: &EnvConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        Ok(match cfg.env {
            EnvKind::Toy => Environment::Toy(cfg.toy.clone()),
            EnvKind::Tabular => Environment::Tabular(Box::new(cfg.tabular.build(cfg.tabular.horizon)?)),
        })
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Environment::Toy(c) => c.gamma,
            Environment::Tabular(s) => s.mdp.gamma(),
        }
    }

    pub fn simulate(&self, n: usize, seed: u64) -> Result<Vec<Trajectory>, HarnessError> {
        Ok(match self {
            Environment::Toy(c) => toy_generate(&ToyConfig { n, ..c.clone() }, seed)?,
            Environment::Tabular(s) => simulate_tabular(&s.mdp, &s.behavior, &s.evaluation, n, seed),
        })
    }

    /// Individual-level test points with their true effects.
    ///
    /// Tabular: `n_test` initial states drawn from the initial distribution,
    /// exact effects. Toy: `grid_points` equally spaced points with the
    /// `n_rollouts` Monte-Carlo oracle.
    pub fn test_points(&self, oracle: &OracleConfig, seed: u64) -> Result<Vec<(Vec<f64>, f64)>, HarnessError> {
        match self {
            Environment::Tabular(s) => {
                let effects = treatment_effects(&s.mdp, &s.evaluation, &s.behavior);
                let mut rng = seed::rng(seed::child(seed, stage::TEST_POINTS));
                Ok((0..oracle.n_test)
                    .map(|_| {
                        let st = sample_index(s.mdp.initial(), rng.random());
                        (s.mdp.features(st).to_vec(), effects[st])
                    })
                    .collect())
            }
            Environment::Toy(c) => {
                let grid = toy::grid(oracle.grid_points);
                let base = seed::child(seed, stage::ORACLE);
                par::map_range(grid.len(), |i| {
                    toy_oracle(c, grid[i], oracle.n_rollouts, seed::child(base, i as u64)).map(|t| (vec![grid[i]], t))
                })
                .into_iter()
                .map(|r| r.map_err(HarnessError::from))
                .collect()
            }
        }
    }

    /// Everything needed to score any tree built on this environment.
    pub fn ground_truth(&self, oracle: &OracleConfig, seed: u64) -> Result<GroundTruth, HarnessError> {
        match self {
            Environment::Tabular(s) => {
                let effects = treatment_effects(&s.mdp, &s.evaluation, &s.behavior);
                Ok(GroundTruth::Tabular {
                    surrogate: s.clone(),
                    effects,
                })
            }
            Environment::Toy(c) => {
                let n = oracle.group_grid;
                let base = seed::child(seed, stage::GROUP_ORACLE);
                let points = par::map_range(n, |i| {
                    let x = (i as f64 + 0.5) / n as f64;
                    toy_oracle(c, x, oracle.n_rollouts, seed::child(base, i as u64)).map(|t| (vec![x], t))
                })
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
                Ok(GroundTruth::Points(points))
            }
        }
    }
}

/// Source of true group effects.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Exact effects of every state, weighted by the initial distribution.
    Tabular {
        surrogate: Box<Surrogate>,
        effects: Vec<f64>,
    },
    /// Equally weighted sample points with (estimated) effects.
    Points(Vec<(Vec<f64>, f64)>),
}

impl GroundTruth {
    /// `(leaf, T_true)` for every leaf that has ground-truth mass.
    pub fn group_truth(&self, tree: &Tree) -> Result<Vec<(usize, f64)>, HarnessError> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); tree.leaf_count()];
        match self {
            GroundTruth::Tabular { surrogate, effects } => {
                let mdp = &surrogate.mdp;
                for s in (0..mdp.n_states()).filter(|&s| mdp.initial()[s] > 0.0) {
                    members[tree.assign_leaf(mdp.features(s))?].push(s);
                }
                Ok(members
                    .iter()
                    .enumerate()
                    .filter_map(|(leaf, m)| group_effect_from(mdp, effects, m).ok().map(|t| (leaf, t)))
                    .collect())
            }
            GroundTruth::Points(points) => {
                for (i, (x, _)) in points.iter().enumerate() {
                    members[tree.assign_leaf(x)?].push(i);
                }
                Ok(members
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| !m.is_empty())
                    .map(|(leaf, m)| (leaf, m.iter().map(|&i| points[i].1).sum::<f64>() / m.len() as f64))
                    .collect())
            }
        }
    }
}

pub fn simulate(env: &EnvConfig, seed: u64) -> Result<Vec<Trajectory>, HarnessError> {
    Environment::build(env)?.simulate(env.n(), seed::child(seed, stage::SIMULATE))
}

pub fn records(trajs: &[Trajectory], gamma: f64) -> Result<Dataset, HarnessError> {
    Ok(data::to_records(trajs, gamma)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutput {
    #[serde(skip)]
    pub tree: Tree,
    pub n_partition: usize,
    pub n_estimation: usize,
    pub g_inf: f64,
    pub leaf_count: usize,
    /// Loss of the unsplit partition set.
    pub root_loss: f64,
    /// Loss of the partition set under the final tree.
    pub final_loss: f64,
    pub splits: Vec<SplitRecord>,
}

fn split(data: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
    Ok(data::split_dataset(data, cfg.split_fraction, seed::child(seed, stage::SPLIT))?)
}

fn g_inf(data: &Dataset, cfg: &ExperimentConfig) -> f64 {
    cfg.g_inf.unwrap_or(data.g_inf())
}

/// Partitioning phase: split, then grow a tree on the first part.
pub fn fit(data: &Dataset, cfg: &ExperimentConfig, loss: &LossConfig, seed: u64) -> Result<FitOutput, HarnessError> {
    let (part, est) = split(data, cfg, seed)?;
    let scale = g_inf(data, cfg);
    let outcome = build_tree_with_scale(&part, loss, scale)?;
    let groups = inference::group_by_leaf(&outcome.tree, &part)?;
    let labeled = LabeledPartition::new(groups.into_iter().enumerate().collect());
    let final_loss = giope_loss(&labeled, loss, scale)?;
    Ok(FitOutput {
        leaf_count: outcome.tree.leaf_count(),
        tree: outcome.tree,
        n_partition: part.len(),
        n_estimation: est.len(),
        g_inf: scale,
        root_loss: outcome.root_loss,
        final_loss,
        splits: outcome.splits,
    })
}

/// Estimation phase on the held-out part of the same split.
pub fn estimate(data: &Dataset, tree: &Tree, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<GroupEstimate>, HarnessError> {
    if data.m() != tree.m() {
        return Err(TreeError::DimensionMismatch {
            expected: tree.m(),
            found: data.m(),
        }
        .into());
    }
    let (_, est) = split(data, cfg, seed)?;
    Ok(inference::estimate_groups_with_scale(
        tree,
        &est,
        cfg.bootstrap_b,
        cfg.ci_level,
        seed::child(seed, stage::BOOTSTRAP),
        g_inf(data, cfg),
    )?)
}

/// `path` with `suffix` appended to the file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn meta(cfg: &ExperimentConfig, seed: u64) -> serde_json::Value {
    json!({
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "seed": seed,
    })
}

fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    records(&data::load_jsonl(path)?, cfg.env.gamma())
}

/// Writes the simulated dataset as JSONL plus a `.meta.json` sidecar.
pub fn cmd_simulate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<usize, HarnessError> {
    let trajs = simulate(&cfg.env, seed)?;
    data::save_jsonl(out, &trajs)?;
    write_json(&sidecar(out, ".meta.json"), &meta(cfg, seed))?;
    Ok(trajs.len())
}

/// Fits a tree on the partition half of `data` and writes it with a
/// `.report.json` sidecar listing every accepted split.
pub fn cmd_fit(cfg: &ExperimentConfig, seed: u64, data_path: &Path, out: &Path) -> Result<FitOutput, HarnessError> {
    let data = load_data(data_path, cfg)?;
    let fitted = fit(&data, cfg, &cfg.loss, seed)?;
    std::fs::write(out, fitted.tree.to_json())?;
    let mut report = meta(cfg, seed);
    report["fit"] = serde_json::to_value(&fitted).expect("fit report serializes");
    write_json(&sidecar(out, ".report.json"), &report)?;
    Ok(fitted)
}

/// Writes the group report CSV for the estimation half.
pub fn cmd_estimate(
    cfg: &ExperimentConfig,
    seed: u64,
    data_path: &Path,
    tree_path: &Path,
    out: &Path,
) -> Result<Vec<GroupEstimate>, HarnessError> {
    let data = load_data(data_path, cfg)?;
    let tree = Tree::from_json(&std::fs::read_to_string(tree_path)?)?;
    let estimates = estimate(&data, &tree, cfg, seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    inference::write_group_csv(&mut w, &estimates)?;
    w.flush()?;
    write_json(&sidecar(out, ".meta.json"), &meta(cfg, seed))?;
    Ok(estimates)
}

/// Writes per-test-point truths and, when a tree is given, per-leaf truths to
/// a `.groups.csv` sidecar.
pub fn cmd_oracle(cfg: &ExperimentConfig, seed: u64, tree_path: Option<&Path>, out: &Path) -> Result<usize, HarnessError> {
    let env = Environment::build(&cfg.env)?;
    let points = env.test_points(&cfg.oracle, seed)?;
    let m = points.first().map_or(0, |(x, _)| x.len());
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["point".to_string()];
    header.extend((0..m).map(|j| format!("x{j}")));
    header.push("t_true".into());
    w.write_record(&header)?;
    for (i, (x, t)) in points.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(x.iter().map(f64::to_string));
        row.push(t.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;

    if let Some(tp) = tree_path {
        let tree = Tree::from_json(&std::fs::read_to_string(tp)?)?;
        let truth = env.ground_truth(&cfg.oracle, seed)?.group_truth(&tree)?;
        let mut g = csv::Writer::from_path(sidecar(out, ".groups.csv"))?;
        g.write_record(["leaf", "t_true"])?;
        for (leaf, t) in truth {
            g.write_record([leaf.to_string(), t.to_string()])?;
        }
        g.flush()?;
    }
    write_json(&sidecar(out, ".meta.json"), &meta(cfg, seed))?;
    Ok(points.len())
}
