//! Sepsis-style tabular surrogate.
//!
//! A patient state is a tuple of `n_vitals` severity levels (0 = normal,
//! `n_levels - 1` = worst) plus a diabetes flag. Actions are bitmasks over
//! treatments: bit 0 vasopressor, bit 1 mechanical ventilation, bit 2
//! antibiotics. Each vital independently improves, stays or worsens per step.
//! Untreated vitals never improve; the vasopressor only works for diabetics
//! and ventilation only for everyone else. Reaching all-normal vitals
//! discharges the patient (+1), reaching the severity threshold kills them
//! (-1).
//!
//! Policies follow the usual recipe: the optimal policy softened by
//! `soften_eps`, then behavior and evaluation policies shift mass away from
//! ventilation and vasopressor actions respectively.

use serde::{Deserialize, Serialize};

use super::tabular::{policy_iteration, shift_action_mass, soften, TabularMdp, TabularPolicy};
use super::EnvError;

pub const VASOPRESSOR: usize = 0;
pub const VENTILATION: usize = 1;
pub const ANTIBIOTICS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionShift {
    pub actions: Vec<usize>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub n_levels: usize,
    pub n_vitals: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub soften_eps: f64,
    /// Behavior policy: less ventilation by default.
    pub b_shift: ActionShift,
    /// Evaluation policy: less vasopressor by default.
    pub e_shift: ActionShift,
    pub n: usize,
    pub diabetic_fraction: f64,
}

/// Actions whose bitmask contains `treatment`.
pub fn actions_with(treatment: usize, n_actions: usize) -> Vec<usize> {
    (0..n_actions).filter(|a| a >> treatment & 1 == 1).collect()
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        let n_actions = 8;
        Self {
            n_levels: 4,
            n_vitals: 3,
            n_actions,
            gamma: 0.99,
            horizon: 8,
            soften_eps: 0.1,
            b_shift: ActionShift {
                actions: actions_with(VENTILATION, n_actions),
                delta: 0.15,
            },
            e_shift: ActionShift {
                actions: actions_with(VASOPRESSOR, n_actions),
                delta: 0.20,
            },
            n: 10_000,
            diabetic_fraction: 0.3,
        }
    }
}

/// Transition probabilities for a single vital.
#[derive(Debug, Clone, Copy)]
struct VitalMove {
    improve: f64,
    worsen: f64,
}

const BASE_WORSEN: f64 = 0.45;
const DIABETIC_EXTRA_WORSEN: f64 = 0.05;
/// Severity below the maximum at which the patient dies.
const DEATH_MARGIN: usize = 3;

/// Gain in improvement probability when `treatment` is applied to its vital.
fn treatment_gain(treatment: usize, diabetic: bool) -> f64 {
    match (treatment, diabetic) {
        (VASOPRESSOR, true) | (VENTILATION, false) => 0.9,
        (ANTIBIOTICS, _) => 0.3,
        _ => 0.0,
    }
}

fn vital_move(vital: usize, action: usize, n_treatments: usize, diabetic: bool) -> VitalMove {
    let mut improve = 0.0;
    // vital k is treated by treatment k
    if vital < n_treatments && action >> vital & 1 == 1 {
        improve += treatment_gain(vital, diabetic);
    }
    let mut worsen = BASE_WORSEN + if diabetic { DIABETIC_EXTRA_WORSEN } else { 0.0 };
    // ventilation destabilizes blood pressure in diabetics
    if diabetic && vital == VASOPRESSOR && n_treatments > VENTILATION && action >> VENTILATION & 1 == 1 {
        worsen += 0.10;
    }
    VitalMove { improve, worsen }
}

/// The built environment and its three policies.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub config: SurrogateConfig,
    pub mdp: TabularMdp,
    pub optimal: TabularPolicy,
    pub softened: TabularPolicy,
    pub behavior: TabularPolicy,
    pub evaluation: TabularPolicy,
}

struct Layout {
    n_levels: usize,
    n_vitals: usize,
    n_tuples: usize,
}

impl Layout {
    fn live_states(&self) -> usize {
        2 * self.n_tuples
    }

    fn death(&self) -> usize {
        self.live_states()
    }

    fn discharge(&self) -> usize {
        self.live_states() + 1
    }

    fn levels(&self, tuple: usize) -> Vec<usize> {
        let mut rest = tuple;
        (0..self.n_vitals)
            .map(|_| {
                let l = rest % self.n_levels;
                rest /= self.n_levels;
                l
            })
            .collect()
    }

    fn tuple(&self, levels: &[usize]) -> usize {
        levels.iter().rev().fold(0, |acc, l| acc * self.n_levels + l)
    }

    fn death_threshold(&self) -> usize {
        // total severity at which the patient dies
        (self.n_vitals * (self.n_levels - 1)).saturating_sub(DEATH_MARGIN).max(1)
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(format!("tabular.{m}")));
        if self.n_levels < 2 {
            return bad("n_levels must be at least 2");
        }
        if self.n_vitals < 1 {
            return bad("n_vitals must be at least 1");
        }
        if self.n_actions < 2 || !self.n_actions.is_power_of_two() {
            return bad("n_actions must be a power of two (one bit per treatment)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.soften_eps) {
            return bad("soften_eps must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.diabetic_fraction) {
            return bad("diabetic_fraction must lie in [0, 1]");
        }
        let states = 2 * self.n_levels.pow(self.n_vitals as u32) + 2;
        if states > 4096 {
            return bad("n_levels^n_vitals is too large for a dense transition table");
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        2 * self.n_levels.pow(self.n_vitals as u32) + 2
    }

    /// Builds the MDP for `horizon` and derives the policies.
    pub fn build(&self, horizon: usize) -> Result<Surrogate, EnvError> {
        self.validate()?;
        let layout = Layout {
            n_levels: self.n_levels,
            n_vitals: self.n_vitals,
            n_tuples: self.n_levels.pow(self.n_vitals as u32),
        };
        let n_states = layout.live_states() + 2;
        let n_actions = self.n_actions;
        let n_treatments = n_actions.trailing_zeros() as usize;
        let threshold = layout.death_threshold();

        let mut transition = vec![0.0; n_states * n_actions * n_states];
        let mut features = Vec::with_capacity(n_states);
        let mut initial = vec![0.0; n_states];
        let mut reward = vec![0.0; n_states];
        let mut terminal = vec![false; n_states];

        let level_weight = |l: usize| (self.n_levels - l) as f64;

        for s in 0..layout.live_states() {
            let diabetic = s >= layout.n_tuples;
            let levels = layout.levels(s % layout.n_tuples);
            let mut f: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
            f.push(if diabetic { 1.0 } else { 0.0 });
            features.push(f);

            let severity: usize = levels.iter().sum();
            if severity > 0 && severity < threshold {
                let w: f64 = levels.iter().map(|&l| level_weight(l)).product();
                initial[s] = w * if diabetic { self.diabetic_fraction } else { 1.0 - self.diabetic_fraction };
            }

            for a in 0..n_actions {
                let row = &mut transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                let moves: Vec<VitalMove> = (0..self.n_vitals)
                    .map(|v| vital_move(v, a, n_treatments, diabetic))
                    .collect();
                // enumerate {-1, 0, +1} per vital
                let combos = 3usize.pow(self.n_vitals as u32);
                for c in 0..combos {
                    let mut rest = c;
                    let mut p = 1.0;
                    let mut next = Vec::with_capacity(self.n_vitals);
                    for (v, mv) in moves.iter().enumerate() {
                        let dir = rest % 3;
                        rest /= 3;
                        let l = levels[v];
                        let improve = if l > 0 { mv.improve.min(1.0) } else { 0.0 };
                        let worsen = if l + 1 < self.n_levels { mv.worsen.min(1.0 - improve) } else { 0.0 };
                        let (pv, nl) = match dir {
                            0 => (improve, l.saturating_sub(1)),
                            1 => ((1.0 - improve - worsen).max(0.0), l),
                            _ => (worsen, l + 1),
                        };
                        p *= pv;
                        next.push(nl);
                    }
                    if p == 0.0 {
                        continue;
                    }
                    let sev: usize = next.iter().sum();
                    let target = if sev == 0 {
                        layout.discharge()
                    } else if sev >= threshold {
                        layout.death()
                    } else {
                        layout.tuple(&next) + if diabetic { layout.n_tuples } else { 0 }
                    };
                    row[target] += p;
                }
            }
        }
        let total: f64 = initial.iter().sum();
        if total <= 0.0 {
            return Err(EnvError::InvalidConfig(
                "tabular: no initial state lies strictly between normal and the death threshold".into(),
            ));
        }
        initial.iter_mut().for_each(|p| *p /= total);

        let (death, discharge) = (layout.death(), layout.discharge());
        for (s, r) in [(death, -1.0), (discharge, 1.0)] {
            reward[s] = r;
            terminal[s] = true;
            let mut f = vec![if r < 0.0 { (self.n_levels - 1) as f64 } else { 0.0 }; self.n_vitals];
            f.push(0.0);
            features.push(f);
            for a in 0..n_actions {
                transition[(s * n_actions + a) * n_states + s] = 1.0;
            }
        }

        let mdp = TabularMdp::new(
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            terminal,
            horizon,
            self.gamma,
            features,
        )?;
        let optimal = policy_iteration(&mdp);
        let softened = soften(&optimal, self.soften_eps)?;
        let behavior = shift_action_mass(&softened, &self.b_shift.actions, self.b_shift.delta)?;
        let evaluation = shift_action_mass(&softened, &self.e_shift.actions, self.e_shift.delta)?;
        Ok(Surrogate {
            config: self.clone(),
            mdp,
            optimal,
            softened,
            behavior,
            evaluation,
        })
    }
}
