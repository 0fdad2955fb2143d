//! Ground-truth environments.
//!
//! * [`tabular`]: finite MDPs, exact policy evaluation and treatment effects.
//! * [`surrogate`]: the sepsis-style tabular environment built on top of it.
//! * [`toy`]: the continuous 1-D process with a Monte-Carlo oracle.

pub mod surrogate;
pub mod tabular;
pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use surrogate::{ActionShift, Surrogate, SurrogateConfig};
pub use tabular::{TabularMdp, TabularPolicy};
pub use toy::ToyConfig;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy is not deterministic in state {0}")]
    NotDeterministic(usize),
    #[error("invalid mass shift: {0}")]
    InvalidDelta(String),
    #[error("group has zero initial-state mass")]
    ZeroMassGroup,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Toy,
    Tabular,
}

/// Environment section of a config file. The section for the unselected
/// environment may be omitted; missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env: EnvKind,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub tabular: SurrogateConfig,
    #[serde(default)]
    pub seed: u64,
}

impl EnvConfig {
    pub fn horizon(&self) -> usize {
        match self.env {
            EnvKind::Toy => self.toy.horizon,
            EnvKind::Tabular => self.tabular.horizon,
        }
    }

    pub fn n(&self) -> usize {
        match self.env {
            EnvKind::Toy => self.toy.n,
            EnvKind::Tabular => self.tabular.n,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self.env {
            EnvKind::Toy => self.toy.gamma,
            EnvKind::Tabular => self.tabular.gamma,
        }
    }

    /// Copy with the selected environment's horizon replaced.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut c = self.clone();
        match c.env {
            EnvKind::Toy => c.toy.horizon = horizon,
            EnvKind::Tabular => c.tabular.horizon = horizon,
        }
        c
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self.env {
            EnvKind::Toy => self.toy.validate(),
            EnvKind::Tabular => self.tabular.validate(),
        }
    }
}
