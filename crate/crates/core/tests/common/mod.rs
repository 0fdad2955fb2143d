#![allow(dead_code)]

use giope::data::EvalRecord;
use giope::envs::{TabularMdp, TabularPolicy};
use giope::tree::Node;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Two live states, two actions; entering state 0 pays 1.
pub fn two_state(horizon: usize, gamma: f64) -> TabularMdp {
    let transition = vec![
        0.9, 0.1, // s0 a0
        0.2, 0.8, // s0 a1
        0.7, 0.3, // s1 a0
        0.1, 0.9, // s1 a1
    ];
    TabularMdp::new(
        2,
        2,
        transition,
        vec![1.0, 0.0],
        vec![0.4, 0.6],
        vec![false, false],
        horizon,
        gamma,
        vec![vec![0.0], vec![1.0]],
    )
    .unwrap()
}

pub fn two_state_policies() -> (TabularPolicy, TabularPolicy) {
    let behavior = TabularPolicy::new(vec![vec![0.5, 0.5], vec![0.6, 0.4]]).unwrap();
    let evaluation = TabularPolicy::new(vec![vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
    (behavior, evaluation)
}

/// Random dense MDP with nonterminal states, one feature per state index.
pub fn random_mdp(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize, horizon: usize, gamma: f64) -> TabularMdp {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(random_simplex(rng, n_states));
    }
    let reward = (0..n_states).map(|_| rng.random_range(-1.0..1.0)).collect();
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        random_simplex(rng, n_states),
        vec![false; n_states],
        horizon,
        gamma,
        (0..n_states).map(|s| vec![s as f64]).collect(),
    )
    .unwrap()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

pub fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> TabularPolicy {
    TabularPolicy::new((0..n_states).map(|_| random_simplex(rng, n_actions)).collect()).unwrap()
}

pub fn records(pairs: &[(f64, f64)]) -> Vec<EvalRecord> {
    pairs.iter().map(|&(rho, g)| EvalRecord::new(vec![], rho, g)).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Leaf ids whose path constraints `x` satisfies, found by walking every
/// root-to-leaf path instead of routing.
pub fn leaves_accepting(node: &Node, x: &[f64]) -> Vec<usize> {
    fn walk(node: &Node, x: &[f64], ok: bool, out: &mut Vec<usize>) {
        match node {
            Node::Leaf { id } => {
                if ok {
                    out.push(*id);
                }
            }
            Node::Internal { feature, threshold, left, right } => {
                walk(left, x, ok && x[*feature] <= *threshold, out);
                walk(right, x, ok && x[*feature] > *threshold, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(node, x, true, &mut out);
    out
}
