//! Stein variational policy gradient.
//!
//! A set of Gaussian policies ("particles") is trained jointly: each
//! particle estimates its own policy gradient, and a kernel couples the
//! updates so that particles climb the utility while repelling each other.
//! The crate contains everything needed to run that end to end on small
//! continuous-control tasks:
//!
//! * [`net`]: flat-parameter tanh MLPs with exact reverse-mode gradients,
//! * [`envs`]: cartpole, mountain car, cart-pole swing-up and a double
//!   pendulum,
//! * [`policy`], [`rollout`], [`estimators`]: Gaussian policies, episode
//!   collection, returns, GAE and four gradient estimators,
//! * [`svgd`]: the kernel, bandwidth heuristic and Stein direction,
//! * [`trainer`]: SVPG, independent and joint training regimes,
//! * [`metrics`], [`checkpoint`]: run artifacts.
//!
//! ```
//! use svpg::envs::EnvId;
//! use svpg::trainer::{Regime, TrainConfig, Trainer};
//!
//! let mut config = TrainConfig::new(EnvId::Cartpole, Regime::Svpg, 2, 200, 2, 7);
//! config.hidden = vec![16];
//! config.eval_transitions = 200;
//! config.final_eval_transitions = 0;
//! let metrics = Trainer::new(config).unwrap().run_to_end().unwrap();
//! assert_eq!(metrics.records.len(), 2);
//! assert!(metrics.records[0].bandwidth.unwrap() > 0.0);
//! ```

pub mod adam;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod net;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod svgd;
pub mod trainer;

pub use error::{Error, Result};
pub use net::{GradientEstimate, NetSpec, ParamVector};
pub use policy::GaussianPolicy;
pub use trainer::{RunMetrics, TrainConfig, Trainer};
