use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::envs::EnvConfig;
use crate::loss::{LossConfig, RegMode, VarianceMode};

/// Ablation ladder: full loss, without regularization, and additionally with
/// the sample variance in place of the proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GIOPE")]
    Giope,
    #[serde(rename = "GIOPE-R")]
    GiopeR,
    #[serde(rename = "GIOPE-RP")]
    GiopeRp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Giope, Variant::GiopeR, Variant::GiopeRp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Giope => "GIOPE",
            Variant::GiopeR => "GIOPE-R",
            Variant::GiopeRp => "GIOPE-RP",
        }
    }

    /// The loss configuration this variant runs with. GIOPE keeps the
    /// configured regularizer (margin when the base has none).
    pub fn loss(self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Giope => {
                cfg.variance_mode = VarianceMode::Proxy;
                if cfg.reg_mode == RegMode::Off {
                    cfg.reg_mode = RegMode::Margin;
                }
            }
            Variant::GiopeR => {
                cfg.variance_mode = VarianceMode::Proxy;
                cfg.reg_mode = RegMode::Off;
            }
            Variant::GiopeRp => {
                cfg.variance_mode = VarianceMode::Sample;
                cfg.reg_mode = RegMode::Off;
            }
        }
        cfg
    }
}

/// Ground-truth settings for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Tabular: test points drawn from the initial distribution.
    pub n_test: usize,
    /// Toy: equally spaced test points on `[0, 1]`.
    pub grid_points: usize,
    /// Toy: rollouts per policy at each point.
    pub n_rollouts: usize,
    /// Toy: midpoint grid used to average effects within a leaf.
    pub group_grid: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_test: 2000,
            grid_points: 25,
            n_rollouts: 30,
            group_grid: 1000,
        }
    }
}

fn default_split() -> f64 {
    0.5
}

fn default_b() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

/// A whole experiment: the environment section sits at the top level next to
/// the estimation and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub env: EnvConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_b", rename = "bootstrap_B")]
    pub bootstrap_b: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    /// Sweep seeds; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Sweep horizons; empty means the environment's own horizon.
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Fixed return scale for the variance proxy instead of the data maximum.
    #[serde(default)]
    pub g_inf: Option<f64>,
}

const TOP_LEVEL_KEYS: [&str; 13] = [
    "env",
    "toy",
    "tabular",
    "seed",
    "loss",
    "split_fraction",
    "bootstrap_B",
    "ci_level",
    "seeds",
    "variants",
    "horizons",
    "oracle",
    "g_inf",
];

impl ExperimentConfig {
    /// Defaults around an environment section.
    pub fn for_env(env: EnvConfig) -> Self {
        Self {
            env,
            loss: LossConfig::default(),
            split_fraction: default_split(),
            bootstrap_b: default_b(),
            ci_level: default_level(),
            seeds: Vec::new(),
            variants: default_variants(),
            horizons: Vec::new(),
            oracle: OracleConfig::default(),
            g_inf: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| HarnessError::Config {
            field: "<document>".into(),
            message: "expected a JSON object".into(),
        })?;
        match obj.get("env").and_then(Value::as_str) {
            Some("toy") | Some("tabular") => {}
            Some(other) => {
                return Err(HarnessError::Config {
                    field: "env".into(),
                    message: format!("unknown environment `{other}`, expected `toy` or `tabular`"),
                })
            }
            None => {
                return Err(HarnessError::Config {
                    field: "env".into(),
                    message: "missing or not a string".into(),
                })
            }
        }
        if let Some(key) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
            return Err(HarnessError::Config {
                field: key.clone(),
                message: "unknown key".into(),
            });
        }
        for key in TOP_LEVEL_KEYS.iter().filter(|k| **k != "env") {
            if let Some(v) = obj.get(*key) {
                check_section(key, v)?;
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| HarnessError::Config {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, message: &str| {
            Err(HarnessError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        self.env.validate()?;
        self.loss.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction", "must lie in (0, 1)");
        }
        if self.bootstrap_b == 0 {
            return bad("bootstrap_B", "must be at least 1");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level", "must lie in (0, 1)");
        }
        if self.variants.is_empty() {
            return bad("variants", "must not be empty");
        }
        if self.horizons.contains(&0) {
            return bad("horizons", "must be positive");
        }
        if let Some(g) = self.g_inf {
            if !(g >= 0.0 && g.is_finite()) {
                return bad("g_inf", "must be a finite nonnegative number");
            }
        }
        if self.oracle.n_rollouts == 0 {
            return bad("oracle.n_rollouts", "must be at least 1");
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.env.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn horizon_list(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.env.horizon()]
        } else {
            self.horizons.clone()
        }
    }
}

/// Deserializes one top-level section on its own so errors name the key.
fn check_section(key: &str, v: &Value) -> Result<(), HarnessError> {
    let err = |e: serde_json::Error| HarnessError::Config {
        field: key.to_string(),
        message: e.to_string(),
    };
    match key {
        "toy" => serde_json::from_value::<crate::envs::ToyConfig>(v.clone()).map(drop).map_err(err),
        "tabular" => serde_json::from_value::<crate::envs::SurrogateConfig>(v.clone()).map(drop).map_err(err),
        "seed" => serde_json::from_value::<u64>(v.clone()).map(drop).map_err(err),
        "loss" => serde_json::from_value::<LossConfig>(v.clone()).map(drop).map_err(err),
        "split_fraction" | "ci_level" => serde_json::from_value::<f64>(v.clone()).map(drop).map_err(err),
        "bootstrap_B" => serde_json::from_value::<usize>(v.clone()).map(drop).map_err(err),
        "seeds" => serde_json::from_value::<Vec<u64>>(v.clone()).map(drop).map_err(err),
        "variants" => serde_json::from_value::<Vec<Variant>>(v.clone()).map(drop).map_err(err),
        "horizons" => serde_json::from_value::<Vec<usize>>(v.clone()).map(drop).map_err(err),
        "oracle" => serde_json::from_value::<OracleConfig>(v.clone()).map(drop).map_err(err),
        "g_inf" => serde_json::from_value::<Option<f64>>(v.clone()).map(drop).map_err(err),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"env":"toy","toy":{"n":100},"seed":3}"#).unwrap();
        assert_eq!(cfg.env.env, EnvKind::Toy);
        assert_eq!(cfg.env.toy.n, 100);
        assert_eq!(cfg.env.toy.kappa, 0.2);
        assert_eq!(cfg.bootstrap_b, 1000);
        assert_eq!(cfg.seed_list(), vec![3]);
        assert_eq!(cfg.variants, Variant::ALL.to_vec());
        assert_eq!(cfg.horizon_list(), vec![4]);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::from_json(
            r#"{"env":"tabular","tabular":{"horizon":4,"n":500},"loss":{"min_leaf":20},"seeds":[1,2],"variants":["GIOPE","GIOPE-RP"],"horizons":[4,8],"bootstrap_B":200}"#,
        )
        .unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.variants, vec![Variant::Giope, Variant::GiopeRp]);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_json(r#"{"env":"mujoco"}"#).unwrap_err();
        assert!(matches!(e, HarnessError::Config { ref field, .. } if field == "env"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"env":"toy","loss":{"alpha":"x"}}"#).unwrap_err();
        assert!(matches!(e, HarnessError::Config { ref field, .. } if field == "loss"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"env":"toy","split_fraction":1.5}"#).unwrap_err();
        assert!(matches!(e, HarnessError::Config { ref field, .. } if field == "split_fraction"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"env":"toy","bogus":1}"#).unwrap_err();
        assert!(matches!(e, HarnessError::Config { ref field, .. } if field == "bogus"), "{e}");
    }

    #[test]
    fn variant_losses() {
        let base = LossConfig::default();
        assert_eq!(Variant::Giope.loss(&base).reg_mode, RegMode::Margin);
        let r = Variant::GiopeR.loss(&base);
        assert_eq!((r.variance_mode, r.reg_mode), (VarianceMode::Proxy, RegMode::Off));
        let rp = Variant::GiopeRp.loss(&base);
        assert_eq!((rp.variance_mode, rp.reg_mode), (VarianceMode::Sample, RegMode::Off));
    }
}
