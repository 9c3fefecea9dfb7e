//! The run configuration file: flat, typed TOML.
//!
//! Only `env`, `regime`, `particles`, `transitions`, `iterations`, `seed`
//! and `output_dir` are required. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svpg::envs::EnvId;
use svpg::estimators::{EstimatorConfig, EstimatorKind};
use svpg::svgd::{AnnealSchedule, Prior, SvpgConfig};
use svpg::trainer::{Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    pub regime: Regime,
    #[serde(default = "defaults::estimator")]
    pub estimator: EstimatorKind,
    pub particles: usize,
    pub transitions: usize,
    pub iterations: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many iterations; 0 keeps only the
    /// final one.
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,

    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    pub anneal_initial: Option<f64>,
    pub anneal_final: Option<f64>,
    pub anneal_iterations: Option<usize>,
    pub max_grad_norm: Option<f64>,

    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::yes")]
    pub normalize_advantages: bool,
    #[serde(default = "defaults::es_perturbations")]
    pub es_perturbations: usize,
    #[serde(default = "defaults::es_step")]
    pub es_step: f64,
    #[serde(default = "defaults::yes")]
    pub es_antithetic: bool,

    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::step_size")]
    pub policy_step_size: f64,
    #[serde(default = "defaults::step_size")]
    pub critic_step_size: f64,
    #[serde(default = "defaults::critic_epochs")]
    pub critic_epochs: usize,
    #[serde(default = "defaults::eval_transitions")]
    pub eval_transitions: usize,
    #[serde(default = "defaults::final_eval_transitions")]
    pub final_eval_transitions: usize,
}

mod defaults {
    use svpg::estimators::EstimatorKind;

    pub fn estimator() -> EstimatorKind {
        EstimatorKind::A2c
    }
    pub fn checkpoint_every() -> usize {
        10
    }
    pub fn alpha() -> f64 {
        10.0
    }
    pub fn gamma() -> f64 {
        0.99
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn es_perturbations() -> usize {
        8
    }
    pub fn es_step() -> f64 {
        0.02
    }
    pub fn hidden() -> Vec<usize> {
        vec![100, 50, 25]
    }
    pub fn step_size() -> f64 {
        0.01
    }
    pub fn critic_epochs() -> usize {
        3
    }
    pub fn eval_transitions() -> usize {
        5000
    }
    pub fn final_eval_transitions() -> usize {
        50_000
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: svpg::Error },
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.train_config().validate().map_err(|source| ConfigError::Invalid {
            path: origin.to_path_buf(),
            source,
        })?;
        let anneal = [
            config.anneal_initial.is_some(),
            config.anneal_final.is_some(),
            config.anneal_iterations.is_some(),
        ];
        if anneal.iter().any(|a| *a) && !anneal.iter().all(|a| *a) {
            return Err(ConfigError::Parse {
                path: origin.to_path_buf(),
                message: "anneal_initial, anneal_final and anneal_iterations must be given together".into(),
            });
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok((Self::parse(&text, path)?, text))
    }

    pub fn train_config(&self) -> TrainConfig {
        let anneal = match (self.anneal_initial, self.anneal_final, self.anneal_iterations) {
            (Some(initial), Some(final_alpha), Some(iterations)) => Some(AnnealSchedule {
                initial,
                final_alpha,
                iterations,
            }),
            _ => None,
        };
        TrainConfig {
            env: self.env,
            regime: self.regime,
            estimator: EstimatorConfig {
                kind: self.estimator,
                es_perturbations: self.es_perturbations,
                es_step: self.es_step,
                es_antithetic: self.es_antithetic,
                gamma: self.gamma,
                lambda: self.lambda,
                normalize_advantages: self.normalize_advantages,
            },
            svpg: SvpgConfig {
                alpha: self.alpha,
                prior: Prior::Flat,
                anneal,
                max_grad_norm: self.max_grad_norm,
            },
            particles: self.particles,
            transitions: self.transitions,
            iterations: self.iterations,
            seed: self.seed,
            hidden: self.hidden.clone(),
            policy_step_size: self.policy_step_size,
            critic_step_size: self.critic_step_size,
            critic_epochs: self.critic_epochs,
            eval_transitions: self.eval_transitions,
            final_eval_transitions: self.final_eval_transitions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
env = "cartpole"
regime = "svpg"
particles = 2
transitions = 100
iterations = 2
seed = 3
output_dir = "out"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL, Path::new("c.toml")).unwrap();
        let t = c.train_config();
        assert_eq!(t.estimator.kind, EstimatorKind::A2c);
        assert_eq!(t.svpg.alpha, 10.0);
        assert_eq!(t.hidden, vec![100, 50, 25]);
        assert_eq!(c.checkpoint_every, 10);
    }

    #[test]
    fn zero_temperature_is_rejected() {
        let text = format!("{MINIMAL}alpha = 0.0\n");
        let err = RunConfig::parse(&text, Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("temperature must be positive"), "{err}");
    }

    #[test]
    fn unknown_keys_and_envs_are_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}colour = 1\n"), Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = RunConfig::parse(&MINIMAL.replace("cartpole", "pong"), Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("pong"), "{err}");
    }

    #[test]
    fn partial_anneal_is_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}anneal_initial = 5.0\n"), Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("together"));
        let ok = format!("{MINIMAL}anneal_initial = 100.0\nanneal_final = 1.0\nanneal_iterations = 100\n");
        let c = RunConfig::parse(&ok, Path::new("c.toml")).unwrap();
        assert_eq!(svpg::svgd::anneal_alpha(&c.train_config().svpg, 50), 50.5);
    }
}
