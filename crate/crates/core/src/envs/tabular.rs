//! Finite MDPs with exact finite-horizon dynamic programming.
//!
//! Rewards are paid on entering a state: a step from a non-terminal state `s`
//! to `s'` earns `reward[s']`, and terminal states absorb with zero reward.
//! Episodes run for at most `horizon` steps and stop early on entering a
//! terminal state.

use rand::Rng;

use super::EnvError;
use crate::data::Trajectory;
use crate::par;
use crate::seed;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial: Vec<f64>,
    terminal: Vec<bool>,
    horizon: usize,
    gamma: f64,
    /// Feature encoding of each state, used as `x0`.
    features: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], what: impl FnOnce() -> String) -> Result<(), String> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
        return Err(format!("{} is not a probability row (sum {sum})", what()));
    }
    Ok(())
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        terminal: Vec<bool>,
        horizon: usize,
        gamma: f64,
        features: Vec<Vec<f64>>,
    ) -> Result<Self, EnvError> {
        let invalid = |m: String| Err(EnvError::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return invalid("need at least one state and one action".into());
        }
        if transition.len() != n_states * n_actions * n_states {
            return invalid(format!("transition has {} entries, expected {}", transition.len(), n_states * n_actions * n_states));
        }
        if reward.len() != n_states || initial.len() != n_states || terminal.len() != n_states || features.len() != n_states {
            return invalid("per-state arrays must have n_states entries".into());
        }
        if !(0.0..=1.0).contains(&gamma) {
            return invalid(format!("gamma {gamma} outside [0, 1]"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return invalid("non-finite reward".into());
        }
        let width = features[0].len();
        if features.iter().any(|f| f.len() != width) {
            return invalid("state features must share one width".into());
        }
        check_row(&initial, || "initial distribution".into()).map_err(EnvError::InvalidMdp)?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let start = (s * n_actions + a) * n_states;
                check_row(&transition[start..start + n_states], || format!("P[{s}][{a}]")).map_err(EnvError::InvalidMdp)?;
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            terminal,
            horizon,
            gamma,
            features,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn features(&self, s: usize) -> &[f64] {
        &self.features[s]
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    /// `P[s][a][.]`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Reward for the step `s -> next`.
    #[inline]
    pub fn step_reward(&self, s: usize, next: usize) -> f64 {
        if self.terminal[s] {
            0.0
        } else {
            self.reward[next]
        }
    }

    /// Largest attainable `|g|` over `horizon` steps.
    pub fn return_bound(&self) -> f64 {
        let r_max = self.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..self.horizon {
            total += disc;
            disc *= self.gamma;
        }
        r_max * total
    }

    /// Expected one-step reward plus discounted continuation for `(s, a)`.
    fn backup(&self, s: usize, a: usize, next_values: &[f64]) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        self.next_dist(s, a)
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(s2, p)| p * (self.reward[s2] + self.gamma * next_values[s2]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        let width = probs.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(EnvError::InvalidPolicy("empty policy".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.len() != width {
                return Err(EnvError::InvalidPolicy(format!("row {s} has {} actions, expected {width}", row.len())));
            }
            check_row(row, || format!("pi[{s}]")).map_err(EnvError::InvalidPolicy)?;
        }
        Ok(Self { probs })
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    /// The action with all the mass, if the row is deterministic.
    pub fn deterministic_action(&self, s: usize) -> Option<usize> {
        let row = &self.probs[s];
        let a = row.iter().position(|p| *p == 1.0)?;
        row.iter().enumerate().all(|(i, p)| i == a || *p == 0.0).then_some(a)
    }
}

/// Finite-horizon backward induction. Returns the greedy action with the full
/// horizon remaining, used as a stationary deterministic policy. Ties go to
/// the lowest action index.
pub fn policy_iteration(mdp: &TabularMdp) -> TabularPolicy {
    let mut values = vec![0.0; mdp.n_states];
    let mut greedy = vec![0usize; mdp.n_states];
    for _ in 0..mdp.horizon {
        let next: Vec<(f64, usize)> = (0..mdp.n_states)
            .map(|s| {
                let mut best = (f64::NEG_INFINITY, 0);
                for a in 0..mdp.n_actions {
                    let q = mdp.backup(s, a, &values);
                    if q > best.0 {
                        best = (q, a);
                    }
                }
                best
            })
            .collect();
        values = next.iter().map(|p| p.0).collect();
        greedy = next.iter().map(|p| p.1).collect();
    }
    TabularPolicy::deterministic(&greedy, mdp.n_actions)
}

/// `V^H_pi(s)` for every state by backward DP.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Vec<f64> {
    let mut values = vec![0.0; mdp.n_states];
    for _ in 0..mdp.horizon {
        values = (0..mdp.n_states)
            .map(|s| {
                policy
                    .row(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| p * mdp.backup(s, a, &values))
                    .sum()
            })
            .collect();
    }
    values
}

/// Moves `eps` of the chosen action's mass evenly onto the other actions.
pub fn soften(policy: &TabularPolicy, eps: f64) -> Result<TabularPolicy, EnvError> {
    let k = policy.n_actions();
    if !(0.0..=1.0).contains(&eps) {
        return Err(EnvError::InvalidDelta(format!("eps {eps} outside [0, 1]")));
    }
    if k < 2 && eps > 0.0 {
        return Err(EnvError::InvalidPolicy("softening needs at least 2 actions".into()));
    }
    let mut probs = Vec::with_capacity(policy.n_states());
    for s in 0..policy.n_states() {
        let a = policy.deterministic_action(s).ok_or(EnvError::NotDeterministic(s))?;
        let other = if k > 1 { eps / (k - 1) as f64 } else { 0.0 };
        let mut row = vec![other; k];
        row[a] = 1.0 - eps;
        probs.push(row);
    }
    Ok(TabularPolicy { probs })
}

/// Scales the mass on `targets` by `1 - delta` in every state and hands the
/// removed mass to the remaining actions in proportion to their current mass
/// (evenly when they have none).
pub fn shift_action_mass(policy: &TabularPolicy, targets: &[usize], delta: f64) -> Result<TabularPolicy, EnvError> {
    let k = policy.n_actions();
    if !(0.0..=1.0).contains(&delta) {
        return Err(EnvError::InvalidDelta(format!("delta {delta} outside [0, 1]")));
    }
    if let Some(a) = targets.iter().find(|&&a| a >= k) {
        return Err(EnvError::InvalidDelta(format!("target action {a} out of range")));
    }
    let is_target: Vec<bool> = (0..k).map(|a| targets.contains(&a)).collect();
    let complement: Vec<usize> = (0..k).filter(|&a| !is_target[a]).collect();
    if complement.is_empty() {
        return Err(EnvError::InvalidDelta("target set covers every action".into()));
    }
    let probs = policy
        .rows()
        .iter()
        .map(|row| {
            let removed: f64 = (0..k).filter(|&a| is_target[a]).map(|a| row[a] * delta).sum();
            let rest: f64 = complement.iter().map(|&a| row[a]).sum();
            (0..k)
                .map(|a| {
                    if is_target[a] {
                        row[a] * (1.0 - delta)
                    } else if rest > 0.0 {
                        row[a] + removed * row[a] / rest
                    } else {
                        removed / complement.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(TabularPolicy { probs })
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `n` episodes under `behavior`, each carrying both policies' probabilities
/// of the taken actions. Episode `i` uses seed `child(seed, i)`.
pub fn simulate(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    evaluation: &TabularPolicy,
    n: usize,
    seed: u64,
) -> Vec<Trajectory> {
    par::map_range(n, |i| {
        let mut rng = seed::rng(seed::child(seed, i as u64));
        let mut s = sample_index(&mdp.initial, rng.random());
        let mut t = Trajectory {
            id: i.to_string(),
            x0: mdp.features[s].clone(),
            actions: Vec::with_capacity(mdp.horizon),
            rewards: Vec::with_capacity(mdp.horizon),
            b_probs: Vec::with_capacity(mdp.horizon),
            e_probs: Vec::with_capacity(mdp.horizon),
        };
        for _ in 0..mdp.horizon {
            if mdp.terminal[s] {
                break;
            }
            let a = sample_index(behavior.row(s), rng.random());
            let next = sample_index(mdp.next_dist(s, a), rng.random());
            t.actions.push(a as u32);
            t.rewards.push(mdp.step_reward(s, next));
            t.b_probs.push(behavior.row(s)[a]);
            t.e_probs.push(evaluation.row(s)[a]);
            s = next;
        }
        t
    })
}

/// `V_e(s) - V_b(s)` for every state.
pub fn treatment_effects(mdp: &TabularMdp, evaluation: &TabularPolicy, behavior: &TabularPolicy) -> Vec<f64> {
    let ve = evaluate_policy(mdp, evaluation);
    let vb = evaluate_policy(mdp, behavior);
    ve.iter().zip(&vb).map(|(e, b)| e - b).collect()
}

/// Individual treatment effect of starting in `state`.
pub fn exact_treatment_effect(mdp: &TabularMdp, evaluation: &TabularPolicy, behavior: &TabularPolicy, state: usize) -> f64 {
    treatment_effects(mdp, evaluation, behavior)[state]
}

/// Initial-distribution-weighted mean of `effects` over `members`.
pub fn group_effect_from(mdp: &TabularMdp, effects: &[f64], members: &[usize]) -> Result<f64, EnvError> {
    let mass: f64 = members.iter().map(|&s| mdp.initial[s]).sum();
    if !(mass > 0.0) {
        return Err(EnvError::ZeroMassGroup);
    }
    Ok(members.iter().map(|&s| mdp.initial[s] * effects[s]).sum::<f64>() / mass)
}

/// Group treatment effect of a set of initial states.
pub fn exact_group_effect(
    mdp: &TabularMdp,
    evaluation: &TabularPolicy,
    behavior: &TabularPolicy,
    members: &[usize],
) -> Result<f64, EnvError> {
    group_effect_from(mdp, &treatment_effects(mdp, evaluation, behavior), members)
}


#[cfg(test)]
mod tests {
    use super::fixtures::two_state;
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rejects_bad_rows() {
        let mut t = vec![0.5; 8];
        t[0] = 0.6;
        let r = TabularMdp::new(2, 2, t, vec![0.0; 2], vec![0.5, 0.5], vec![false; 2], 1, 0.9, vec![vec![]; 2]);
        assert!(matches!(r, Err(EnvError::InvalidMdp(_))));
    }

    #[test]
    fn single_action_policy() {
        let mdp = TabularMdp::new(2, 1, vec![0.5, 0.5, 1.0, 0.0], vec![1.0, 2.0], vec![1.0, 0.0], vec![false; 2], 3, 0.9, vec![vec![]; 2]).unwrap();
        assert_eq!(policy_iteration(&mdp), TabularPolicy::deterministic(&[0, 0], 1));
    }

    #[test]
    fn zero_discount_is_one_step_greedy() {
        let mdp = two_state(5, 0.0);
        let pi = policy_iteration(&mdp);
        // one-step expected reward: s0: a0 0.9, a1 0.2; s1: a0 0.7, a1 0.1
        assert_eq!(pi.deterministic_action(0), Some(0));
        assert_eq!(pi.deterministic_action(1), Some(0));

        // flip rewards so action 1 wins
        let mut flipped = mdp.clone();
        flipped.reward = vec![0.0, 1.0];
        let pi = policy_iteration(&flipped);
        assert_eq!(pi.deterministic_action(0), Some(1));
        assert_eq!(pi.deterministic_action(1), Some(1));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        // reward structure where the best action differs per state
        let transition = vec![
            0.1, 0.9, // s0 a0
            0.6, 0.4, // s0 a1
            0.5, 0.5, // s1 a0
            0.95, 0.05, // s1 a1
        ];
        let mdp = TabularMdp::new(2, 2, transition, vec![2.0, -1.0], vec![0.5, 0.5], vec![false; 2], 6, 0.9, vec![vec![0.0], vec![1.0]]).unwrap();
        let pi = policy_iteration(&mdp);
        let v = evaluate_policy(&mdp, &pi);
        let mut best = f64::NEG_INFINITY;
        let mut best_policy = vec![];
        for a0 in 0..2 {
            for a1 in 0..2 {
                let cand = TabularPolicy::deterministic(&[a0, a1], 2);
                let vc = evaluate_policy(&mdp, &cand);
                assert!(v[0] >= vc[0] - 1e-12 && v[1] >= vc[1] - 1e-12);
                let total = 0.5 * vc[0] + 0.5 * vc[1];
                if total > best {
                    best = total;
                    best_policy = vec![a0, a1];
                }
            }
        }
        assert_eq!(pi, TabularPolicy::deterministic(&best_policy, 2));
    }

    #[test]
    fn soften_examples() {
        let det = TabularPolicy::deterministic(&[0, 1], 2);
        assert_eq!(soften(&det, 0.0).unwrap(), det);
        assert_eq!(soften(&det, 0.1).unwrap().row(0), &[0.9, 0.1]);
        let det8 = TabularPolicy::deterministic(&[3], 8);
        let s = soften(&det8, 0.1).unwrap();
        assert_eq!(s.row(0)[3], 0.9);
        for a in (0..8).filter(|&a| a != 3) {
            assert_eq!(s.row(0)[a], 0.1 / 7.0);
        }
        assert!(matches!(soften(&s, 0.1), Err(EnvError::NotDeterministic(0))));
    }

    #[test]
    fn shift_examples() {
        let p = TabularPolicy::new(vec![vec![0.5, 0.5]]).unwrap();
        assert_eq!(shift_action_mass(&p, &[0], 0.0).unwrap(), p);
        let s = shift_action_mass(&p, &[0], 0.2).unwrap();
        assert!(close(s.row(0)[0], 0.4, 1e-15) && close(s.row(0)[1], 0.6, 1e-15));
        let q = TabularPolicy::new(vec![vec![0.4, 0.6]]).unwrap();
        assert!(matches!(shift_action_mass(&q, &[0, 1], 0.1), Err(EnvError::InvalidDelta(_))));
        let z = TabularPolicy::new(vec![vec![1.0, 0.0, 0.0]]).unwrap();
        let s = shift_action_mass(&z, &[0], 0.3).unwrap();
        assert!(close(s.row(0)[1], 0.15, 1e-15) && close(s.row(0)[2], 0.15, 1e-15));
    }

    #[test]
    fn simulate_edge_cases() {
        let mdp = two_state(3, 0.9);
        let pi = TabularPolicy::uniform(2, 2);
        assert!(simulate(&mdp, &pi, &pi, 0, 1).is_empty());

        let det = TabularMdp::new(2, 2, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0], vec![1.0, -1.0], vec![1.0, 0.0], vec![false; 2], 4, 0.9, vec![vec![0.0], vec![1.0]]).unwrap();
        let b = TabularPolicy::deterministic(&[1, 0], 2);
        let runs = simulate(&det, &b, &pi, 20, 3);
        assert!(runs.windows(2).all(|w| w[0].actions == w[1].actions && w[0].rewards == w[1].rewards));
        assert_eq!(runs[0].e_probs, vec![0.5; 4]);
    }

    #[test]
    fn mc_return_matches_dp_value() {
        let mdp = two_state(3, 1.0);
        let pi = TabularPolicy::new(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let v = evaluate_policy(&mdp, &pi);
        let expected: f64 = mdp.initial().iter().zip(&v).map(|(p, v)| p * v).sum();
        let runs = simulate(&mdp, &pi, &pi, 100_000, 5);
        let returns: Vec<f64> = runs.iter().map(|t| t.rewards.iter().sum()).collect();
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - expected).abs() <= 3.0 * (var / n).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn one_step_effect_by_hand() {
        let mdp = two_state(1, 0.9);
        let e = TabularPolicy::deterministic(&[0, 0], 2);
        let b = TabularPolicy::deterministic(&[1, 1], 2);
        // H=1: expected entry reward; s0: 0.9 vs 0.2, s1: 0.7 vs 0.1
        assert!(close(exact_treatment_effect(&mdp, &e, &b, 0), 0.7, 1e-15));
        assert!(close(exact_treatment_effect(&mdp, &e, &b, 1), 0.6, 1e-15));
        assert_eq!(exact_treatment_effect(&mdp, &e, &e, 1), 0.0);
    }

    #[test]
    fn group_effect_examples() {
        let mdp = TabularMdp::new(
            3,
            1,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0; 3],
            vec![0.2, 0.6, 0.2],
            vec![false; 3],
            1,
            1.0,
            vec![vec![0.0]; 3],
        )
        .unwrap();
        let t = [1.0, -1.0, 5.0];
        assert!(close(group_effect_from(&mdp, &t, &[0, 1]).unwrap(), -0.5, 1e-15));
        assert_eq!(group_effect_from(&mdp, &t, &[2]).unwrap(), 5.0);
        let all = group_effect_from(&mdp, &t, &[0, 1, 2]).unwrap();
        assert!(close(all, 0.2 - 0.6 + 1.0, 1e-15));

        let m2 = two_state(3, 0.9);
        let e = TabularPolicy::uniform(2, 2);
        let b = TabularPolicy::deterministic(&[1, 0], 2);
        assert!(close(
            exact_group_effect(&m2, &e, &b, &[1]).unwrap(),
            exact_treatment_effect(&m2, &e, &b, 1),
            1e-15
        ));
    }

    #[test]
    fn zero_mass_group() {
        let mdp = TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], vec![1.0, 0.0], vec![false; 2], 1, 1.0, vec![vec![]; 2]).unwrap();
        assert!(matches!(group_effect_from(&mdp, &[0.0, 0.0], &[1]), Err(EnvError::ZeroMassGroup)));
    }
}
