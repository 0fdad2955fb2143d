//! Greedy recursive partitioning of the initial-state feature space.
//!
//! Nodes route `x[feature] <= threshold` to the left child. A node is split
//! only when some candidate threshold strictly lowers the node-local loss by
//! more than `cfg.tol`; otherwise it becomes a leaf.

use std::cmp::Ordering;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::data::{Dataset, EvalRecord};
use crate::estimators::Moments;
use crate::loss::{admissible, group_contribution, Inadmissible, LossConfig};
use crate::par;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("root group is inadmissible: {0}")]
    InadmissibleRoot(Inadmissible),
    #[error("feature vector has length {found}, tree expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("tree JSON parse error: {0}")]
    Parse(String),
    #[error("tree JSON schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        id: usize,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    root: Node,
    m: usize,
    leaf_count: usize,
}

/// A candidate split of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Node-local loss of the two-group partition.
    pub loss_after: f64,
}

/// One accepted split, as recorded during building.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRecord {
    pub depth: usize,
    /// Conjunction of conditions leading to the split node.
    pub path: String,
    pub n: usize,
    pub feature: usize,
    pub threshold: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl Tree {
    /// Relabels leaves left-to-right depth-first and counts them.
    pub fn from_root(root: Node, m: usize) -> Self {
        fn relabel(node: &mut Node, next: &mut usize) {
            match node {
                Node::Leaf { id } => {
                    *id = *next;
                    *next += 1;
                }
                Node::Internal { left, right, .. } => {
                    relabel(left, next);
                    relabel(right, next);
                }
            }
        }
        let mut root = root;
        let mut leaf_count = 0;
        relabel(&mut root, &mut leaf_count);
        Self { root, m, leaf_count }
    }

    pub fn single_leaf(m: usize) -> Self {
        Self::from_root(Node::Leaf { id: 0 }, m)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn assign_leaf(&self, x: &[f64]) -> Result<usize, TreeError> {
        if x.len() != self.m {
            return Err(TreeError::DimensionMismatch {
                expected: self.m,
                found: x.len(),
            });
        }
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { id } => return Ok(*id),
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    /// Human-readable rule per leaf, indexed by leaf id.
    pub fn leaf_rules(&self) -> Vec<String> {
        fn walk(node: &Node, path: &mut Vec<String>, out: &mut Vec<String>) {
            match node {
                Node::Leaf { .. } => out.push(rule_text(path)),
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    path.push(format!("x{feature} <= {threshold}"));
                    walk(left, path, out);
                    path.pop();
                    path.push(format!("x{feature} > {threshold}"));
                    walk(right, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::with_capacity(self.leaf_count);
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    pub fn to_json_value(&self) -> Value {
        fn node_json(node: &Node) -> Value {
            match node {
                Node::Leaf { id } => json!({ "leaf": id }),
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => json!({
                    "feature": feature,
                    "threshold": threshold,
                    "left": node_json(left),
                    "right": node_json(right),
                }),
            }
        }
        json!({ "m": self.m, "root": node_json(&self.root) })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("tree JSON is always serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let v: Value = serde_json::from_str(text).map_err(|e| TreeError::Parse(e.to_string()))?;
        let m = v
            .get("m")
            .and_then(Value::as_u64)
            .ok_or_else(|| TreeError::Schema("missing or non-integer `m`".into()))? as usize;
        let root_v = v
            .get("root")
            .ok_or_else(|| TreeError::Schema("missing `root`".into()))?;
        let mut next = 0usize;
        let root = parse_node(root_v, m, &mut next)?;
        Ok(Self {
            root,
            m,
            leaf_count: next,
        })
    }
}

fn rule_text(path: &[String]) -> String {
    if path.is_empty() {
        "all".to_string()
    } else {
        path.join(" AND ")
    }
}

fn parse_node(v: &Value, m: usize, next: &mut usize) -> Result<Node, TreeError> {
    let obj = v
        .as_object()
        .ok_or_else(|| TreeError::Schema("node must be an object".into()))?;
    if let Some(id) = obj.get("leaf") {
        let id = id
            .as_u64()
            .ok_or_else(|| TreeError::Schema("`leaf` must be a non-negative integer".into()))? as usize;
        if id != *next {
            return Err(TreeError::Schema(format!(
                "leaf id {id} out of order, expected {next}"
            )));
        }
        *next += 1;
        return Ok(Node::Leaf { id });
    }
    let feature = obj
        .get("feature")
        .and_then(Value::as_u64)
        .ok_or_else(|| TreeError::Schema("internal node needs integer `feature`".into()))? as usize;
    if feature >= m {
        return Err(TreeError::Schema(format!("feature {feature} >= m = {m}")));
    }
    let threshold = obj
        .get("threshold")
        .and_then(Value::as_f64)
        .filter(|t| t.is_finite())
        .ok_or_else(|| TreeError::Schema("internal node needs finite `threshold`".into()))?;
    let child = |key: &str| {
        obj.get(key)
            .ok_or_else(|| TreeError::Schema(format!("internal node missing `{key}`")))
    };
    let left = parse_node(child("left")?, m, next)?;
    let right = parse_node(child("right")?, m, next)?;
    Ok(Node::Internal {
        feature,
        threshold,
        left: Box::new(left),
        right: Box::new(right),
    })
}

/// Node-local loss of a group: its contribution divided by the node size.
fn local_terms(m: &Moments, cfg: &LossConfig, g_inf: f64) -> Result<f64, Inadmissible> {
    group_contribution(m, cfg, g_inf, true)
}

/// Evenly rank-spaced subset of `k` candidate positions, capped at `cap`.
fn subsample_ranks(k: usize, cap: usize) -> Vec<usize> {
    if k <= cap {
        return (0..k).collect();
    }
    if cap == 1 {
        return vec![(k - 1) / 2];
    }
    let mut out: Vec<usize> = (0..cap)
        .map(|i| ((i as f64) * (k - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Best split of `records` on a single feature: first candidate (ascending
/// threshold) achieving the minimum node-local loss.
fn best_split_on_feature(
    records: &[EvalRecord],
    feature: usize,
    total_loss_scale: f64,
    cfg: &LossConfig,
    g_inf: f64,
) -> Option<Split> {
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].x[feature].total_cmp(&records[b].x[feature]));

    // positions p such that the first p+1 sorted records go left
    let boundaries: Vec<usize> = (0..n.saturating_sub(1))
        .filter(|&p| records[order[p]].x[feature] < records[order[p + 1]].x[feature])
        .collect();
    if boundaries.is_empty() {
        return None;
    }
    let chosen = subsample_ranks(boundaries.len(), cfg.max_thresholds);

    let mut prefix = vec![Moments::default(); n + 1];
    for (i, &idx) in order.iter().enumerate() {
        let mut m = prefix[i];
        m.push(&records[idx]);
        prefix[i + 1] = m;
    }
    let mut suffix = vec![Moments::default(); n + 1];
    for i in (0..n).rev() {
        let mut m = suffix[i + 1];
        m.push(&records[order[i]]);
        suffix[i] = m;
    }

    let mut best: Option<Split> = None;
    for &c in &chosen {
        let p = boundaries[c];
        let n_left = p + 1;
        let n_right = n - n_left;
        if n_left < cfg.min_leaf || n_right < cfg.min_leaf {
            continue;
        }
        let (left, right) = (&prefix[n_left], &suffix[n_left]);
        let (Ok(l), Ok(r)) = (local_terms(left, cfg, g_inf), local_terms(right, cfg, g_inf)) else {
            continue;
        };
        let loss = (l + r) / total_loss_scale;
        if best.is_none_or(|b| loss < b.loss_after) {
            best = Some(Split {
                feature,
                threshold: midpoint(records[order[p]].x[feature], records[order[p + 1]].x[feature]),
                loss_after: loss,
            });
        }
    }
    best
}

/// Node-local loss of treating `records` as a single group.
pub fn node_loss(records: &[EvalRecord], cfg: &LossConfig, g_inf: f64) -> Result<f64, Inadmissible> {
    let m = Moments::from_records(records);
    Ok(local_terms(&m, cfg, g_inf)? / m.n as f64)
}

/// Best admissible split of `records`, or `None` when no candidate lowers the
/// unsplit loss by more than `cfg.tol`. Features are scanned in index order
/// and ties go to the lowest feature, then the lowest threshold.
pub fn best_split(records: &[EvalRecord], cfg: &LossConfig, g_inf: f64) -> Option<Split> {
    let parent = node_loss(records, cfg, g_inf).ok()?;
    let m = records.first()?.x.len();
    let n = records.len() as f64;
    let per_feature = par::map_range(m, |f| best_split_on_feature(records, f, n, cfg, g_inf));
    let best = per_feature
        .into_iter()
        .flatten()
        .fold(None::<Split>, |acc, s| match acc {
            Some(b) if s.loss_after.partial_cmp(&b.loss_after) != Some(Ordering::Less) => Some(b),
            _ => Some(s),
        })?;
    (parent - best.loss_after > cfg.tol).then_some(best)
}

/// Canonical record order so the built tree depends only on dataset content.
fn canonical_order(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        a.x.iter()
            .zip(&b.x)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.rho.total_cmp(&b.rho))
            .then_with(|| a.g.total_cmp(&b.g))
    });
}

/// Result of building a tree: the tree plus the accepted splits in build order.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub tree: Tree,
    pub splits: Vec<SplitRecord>,
    pub root_loss: f64,
}

/// Builds a tree using the dataset's own `g_inf`.
pub fn build_tree(ds: &Dataset, cfg: &LossConfig) -> Result<Tree, TreeError> {
    build_tree_with_scale(ds, cfg, ds.g_inf()).map(|o| o.tree)
}

/// Builds a tree with an explicit return scale `g_inf` (e.g. the full-dataset
/// value shared by both halves of a split).
pub fn build_tree_with_scale(ds: &Dataset, cfg: &LossConfig, g_inf: f64) -> Result<BuildOutcome, TreeError> {
    let mut records = ds.records().to_vec();
    if records.is_empty() {
        return Err(TreeError::InadmissibleRoot(Inadmissible::Empty));
    }
    let root_moments = Moments::from_records(&records);
    admissible(&root_moments, cfg).map_err(TreeError::InadmissibleRoot)?;
    let root_loss = node_loss(&records, cfg, g_inf).map_err(TreeError::InadmissibleRoot)?;
    canonical_order(&mut records);

    let mut splits = Vec::new();
    let mut path = Vec::new();
    let root = grow(records, 0, cfg, g_inf, &mut path, &mut splits);
    Ok(BuildOutcome {
        tree: Tree::from_root(root, ds.m()),
        splits,
        root_loss,
    })
}

fn grow(
    records: Vec<EvalRecord>,
    depth: usize,
    cfg: &LossConfig,
    g_inf: f64,
    path: &mut Vec<String>,
    log: &mut Vec<SplitRecord>,
) -> Node {
    if cfg.max_depth.is_some_and(|d| depth >= d) {
        return Node::Leaf { id: 0 };
    }
    let Some(split) = best_split(&records, cfg, g_inf) else {
        return Node::Leaf { id: 0 };
    };
    let loss_before = node_loss(&records, cfg, g_inf).expect("split node is admissible");
    log.push(SplitRecord {
        depth,
        path: rule_text(path),
        n: records.len(),
        feature: split.feature,
        threshold: split.threshold,
        loss_before,
        loss_after: split.loss_after,
    });
    let (left, right): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| r.x[split.feature] <= split.threshold);

    path.push(format!("x{} <= {}", split.feature, split.threshold));
    let left = grow(left, depth + 1, cfg, g_inf, path, log);
    path.pop();
    path.push(format!("x{} > {}", split.feature, split.threshold));
    let right = grow(right, depth + 1, cfg, g_inf, path, log);
    path.pop();

    Node::Internal {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(left),
        right: Box::new(right),
    }
}
