//! One-dimensional toy process on `[0, 1]`.
//!
//! `x_{t+1} = clip(x_t + kappa * a_t + eps, 0, 1)` with `a_t in {-1, 0, 1}`,
//! `eps ~ N(0, noise_sd^2)` and reward `r(x) = 1 - |x - 0.5|`. An episode takes
//! `horizon` actions and collects `r(x_0), ..., r(x_H)`; the final state's
//! reward is folded into the last step so the per-step arrays stay aligned.
//!
//! The behavior policy prefers moving right below 0.2 and left from 0.2 on;
//! the evaluation policy prefers moving right up to 0.8 and left above it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tabular::sample_index;
use super::EnvError;
use crate::data::Trajectory;
use crate::par;
use crate::seed;

/// Actions in index order.
pub const ACTIONS: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub kappa: f64,
    pub noise_sd: f64,
    pub horizon: usize,
    pub n: usize,
    pub gamma: f64,
    /// Replace the evaluation policy with the behavior policy.
    pub null_effect: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            kappa: 0.2,
            noise_sd: 0.05,
            horizon: 4,
            n: 50_000,
            gamma: 0.99,
            null_effect: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(EnvError::InvalidConfig("toy.noise_sd must be a finite nonnegative number".into()));
        }
        if !self.kappa.is_finite() {
            return Err(EnvError::InvalidConfig("toy.kappa must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(EnvError::InvalidConfig("toy.gamma must lie in [0, 1]".into()));
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("toy.horizon must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn reward(x: f64) -> f64 {
    1.0 - (x - 0.5).abs()
}

pub fn behavior_probs(x: f64) -> [f64; 3] {
    if x < 0.2 {
        [0.25, 0.25, 0.5]
    } else {
        [0.5, 0.25, 0.25]
    }
}

pub fn evaluation_probs(x: f64) -> [f64; 3] {
    if x > 0.8 {
        [0.5, 0.25, 0.25]
    } else {
        [0.25, 0.25, 0.5]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPolicy {
    Behavior,
    Evaluation,
}

impl ToyPolicy {
    fn probs(self, x: f64, cfg: &ToyConfig) -> [f64; 3] {
        match self {
            ToyPolicy::Evaluation if !cfg.null_effect => evaluation_probs(x),
            _ => behavior_probs(x),
        }
    }
}

fn noise(cfg: &ToyConfig) -> Normal<f64> {
    Normal::new(0.0, cfg.noise_sd).expect("validated noise_sd")
}

fn step(x: f64, action: usize, kappa: f64, eps: f64) -> f64 {
    (x + kappa * ACTIONS[action] + eps).clamp(0.0, 1.0)
}

/// One episode from `x0` under `policy`; returns `(actions, rewards, states)`.
fn rollout(cfg: &ToyConfig, x0: f64, policy: ToyPolicy, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let normal = noise(cfg);
    let mut x = x0;
    let mut actions = Vec::with_capacity(cfg.horizon);
    let mut rewards = Vec::with_capacity(cfg.horizon);
    let mut states = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let a = sample_index(&policy.probs(x, cfg), rng.random());
        let eps = normal.sample(rng);
        states.push(x);
        actions.push(a);
        rewards.push(reward(x));
        x = step(x, a, cfg.kappa, eps);
    }
    if let Some(last) = rewards.last_mut() {
        *last += cfg.gamma * reward(x);
    }
    (actions, rewards, states)
}

fn discounted(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// `n` behavior-policy episodes with `x0 ~ Uniform[0, 1]`. Episode `i` uses
/// seed `child(seed, i)`.
pub fn toy_generate(cfg: &ToyConfig, seed: u64) -> Result<Vec<Trajectory>, EnvError> {
    cfg.validate()?;
    Ok(par::map_range(cfg.n, |i| {
        let mut rng = seed::rng(seed::child(seed, i as u64));
        let x0: f64 = rng.random();
        let (actions, rewards, states) = rollout(cfg, x0, ToyPolicy::Behavior, &mut rng);
        let b_probs = actions.iter().zip(&states).map(|(&a, &x)| ToyPolicy::Behavior.probs(x, cfg)[a]).collect();
        let e_probs = actions.iter().zip(&states).map(|(&a, &x)| ToyPolicy::Evaluation.probs(x, cfg)[a]).collect();
        Trajectory {
            id: i.to_string(),
            x0: vec![x0],
            actions: actions.iter().map(|&a| a as u32).collect(),
            rewards,
            b_probs,
            e_probs,
        }
    }))
}

/// Monte-Carlo treatment effect at `x0`: mean evaluation-policy return minus
/// mean behavior-policy return over `n_rollouts` each. Rollout `i` of both
/// policies shares the seed `child(seed, i)`.
pub fn toy_oracle(cfg: &ToyConfig, x0: f64, n_rollouts: usize, seed: u64) -> Result<f64, EnvError> {
    cfg.validate()?;
    if n_rollouts == 0 {
        return Err(EnvError::InvalidConfig("n_rollouts must be at least 1".into()));
    }
    let mut diff = 0.0;
    for i in 0..n_rollouts {
        let s = seed::child(seed, i as u64);
        let (_, re, _) = rollout(cfg, x0, ToyPolicy::Evaluation, &mut seed::rng(s));
        let (_, rb, _) = rollout(cfg, x0, ToyPolicy::Behavior, &mut seed::rng(s));
        diff += discounted(&re, cfg.gamma) - discounted(&rb, cfg.gamma);
    }
    Ok(diff / n_rollouts as f64)
}

/// `n` equally spaced points covering `[0, 1]` including both ends.
pub fn grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::discounted_return;

    fn frozen(h: usize) -> ToyConfig {
        ToyConfig {
            kappa: 0.0,
            noise_sd: 0.0,
            horizon: h,
            n: 50,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn frozen_dynamics_closed_form() {
        let cfg = frozen(1);
        for t in toy_generate(&cfg, 4).unwrap() {
            let x0 = t.x0[0];
            let expected = reward(x0) + cfg.gamma * reward(x0);
            assert!((discounted_return(&t, cfg.gamma) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn behavior_probabilities_come_from_table() {
        let cfg = ToyConfig { n: 500, ..ToyConfig::default() };
        let trajs = toy_generate(&cfg, 1).unwrap();
        assert!(trajs.iter().flat_map(|t| &t.b_probs).all(|p| *p == 0.25 || *p == 0.5));
        assert!(trajs.iter().all(|t| t.actions.len() == cfg.horizon));
        assert_eq!(trajs, toy_generate(&cfg, 1).unwrap());
    }

    #[test]
    fn null_effect_oracle_is_exactly_zero() {
        let cfg = ToyConfig { null_effect: true, ..ToyConfig::default() };
        for x in [0.0, 0.3, 0.9] {
            assert_eq!(toy_oracle(&cfg, x, 30, 8).unwrap(), 0.0);
        }
    }

    #[test]
    fn frozen_oracle_is_zero() {
        // without motion both policies collect identical rewards
        assert_eq!(toy_oracle(&frozen(3), 0.4, 10, 1).unwrap(), 0.0);
    }

    /// Exact effect for noise-free dynamics by enumerating action sequences.
    fn exact_noise_free(cfg: &ToyConfig, x0: f64, policy: ToyPolicy) -> f64 {
        fn go(cfg: &ToyConfig, x: f64, depth: usize, policy: ToyPolicy) -> f64 {
            if depth == cfg.horizon {
                return reward(x);
            }
            let probs = policy.probs(x, cfg);
            reward(x)
                + cfg.gamma
                    * (0..3)
                        .map(|a| probs[a] * go(cfg, step(x, a, cfg.kappa, 0.0), depth + 1, policy))
                        .sum::<f64>()
        }
        go(cfg, x0, 0, policy)
    }

    #[test]
    fn noise_free_oracle_matches_enumeration() {
        let cfg = ToyConfig {
            noise_sd: 0.0,
            horizon: 3,
            ..ToyConfig::default()
        };
        for x0 in [0.1, 0.5, 0.85] {
            let exact = exact_noise_free(&cfg, x0, ToyPolicy::Evaluation) - exact_noise_free(&cfg, x0, ToyPolicy::Behavior);
            let n = 20_000;
            let reps: Vec<f64> = (0..n).map(|i| toy_oracle(&cfg, x0, 1, seed::child(77, i)).unwrap()).collect();
            let mean = reps.iter().sum::<f64>() / n as f64;
            let var = reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!((mean - exact).abs() <= 3.0 * se.max(1e-12), "x0={x0}: {mean} vs {exact}");
        }
    }

    #[test]
    fn oracle_variance_halves_when_rollouts_double() {
        let cfg = ToyConfig::default();
        let var_of = |k: usize| {
            let reps: Vec<f64> = (0..100).map(|r| toy_oracle(&cfg, 0.3, k, seed::derive(5, &[k as u64, r])).unwrap()).collect();
            let m = reps.iter().sum::<f64>() / 100.0;
            reps.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0
        };
        let ratio = var_of(60) / var_of(30);
        assert!((0.25..=0.75).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn grid_has_requested_points() {
        let g = grid(25);
        assert_eq!(g.len(), 25);
        assert_eq!((g[0], g[24]), (0.0, 1.0));
    }

    #[test]
    fn return_bound_holds() {
        let cfg = ToyConfig { n: 2000, ..ToyConfig::default() };
        let bound = (0..=cfg.horizon).map(|t| cfg.gamma.powi(t as i32)).sum::<f64>();
        for t in toy_generate(&cfg, 2).unwrap() {
            assert!(discounted_return(&t, cfg.gamma).abs() <= bound + 1e-12);
        }
    }
}
