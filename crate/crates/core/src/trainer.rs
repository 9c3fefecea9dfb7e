//! Training regimes over a set of particles: Stein variational updates,
//! independent learners, and a single agent with the pooled budget.
//!
//! A [`Trainer`] advances one iteration per [`Trainer::step`]. Every
//! iteration each agent collects its samples and estimates its gradient
//! concurrently; the parameter update is then applied serially. All random
//! draws come from [`crate::rng::stream`] coordinates, so results do not
//! depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::envs::{EnvId, Environment};
use crate::error::{Error, Result};
use crate::estimators::{
    a2c_gradient, baseline_gradient, critic_fit_targets, es_gradient, reinforce_gradient,
    CriticNet, EstimatorConfig, EstimatorKind,
};
use crate::net::{norm, NetSpec, ParamVector};
use crate::policy::{GaussianPolicy, SMALL_STD};
use crate::rng::{particle_seed, stream, Purpose, RngStream};
use crate::rollout::{collect, discounted_returns, transition_count, Trajectory};
use crate::svgd::{
    anneal_alpha, clip_norm, median_bandwidth, svpg_direction_with_kernel, KernelEval, SvpgConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Svpg,
    Independent,
    Joint,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Svpg => "svpg",
            Regime::Independent => "independent",
            Regime::Joint => "joint",
        }
    }
}

/// Everything a training run depends on besides the worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvId,
    pub regime: Regime,
    pub estimator: EstimatorConfig,
    pub svpg: SvpgConfig,
    /// Number of particles `n`. In the joint regime this only scales the
    /// budget of the single agent to `n * m`.
    pub particles: usize,
    /// Transitions `m` per particle per iteration.
    pub transitions: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub policy_step_size: f64,
    pub critic_step_size: f64,
    pub critic_epochs: usize,
    /// Per-particle evaluation budget after every update; 0 disables it.
    pub eval_transitions: usize,
    /// Per-particle evaluation budget once training ends; 0 disables it.
    pub final_eval_transitions: usize,
}

impl TrainConfig {
    pub fn new(env: EnvId, regime: Regime, particles: usize, transitions: usize, iterations: usize, seed: u64) -> Self {
        TrainConfig {
            env,
            regime,
            estimator: EstimatorConfig::default(),
            svpg: SvpgConfig::default(),
            particles,
            transitions,
            iterations,
            seed,
            hidden: vec![100, 50, 25],
            policy_step_size: 0.01,
            critic_step_size: 0.01,
            critic_epochs: 3,
            eval_transitions: 5000,
            final_eval_transitions: 50_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be at least 1".into()));
        }
        if self.transitions == 0 {
            return Err(Error::Config("transitions must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        for (name, v) in [
            ("policy_step_size", self.policy_step_size),
            ("critic_step_size", self.critic_step_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.estimator.validate()?;
        self.svpg.validate()
    }

    /// Number of agents that are trained.
    pub fn agents(&self) -> usize {
        match self.regime {
            Regime::Joint => 1,
            _ => self.particles,
        }
    }
}

/// Per-agent state. Critics are never part of the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub policies: Vec<GaussianPolicy>,
    pub critics: Vec<Option<CriticNet>>,
    pub adam_states: Vec<AdamState>,
    /// Per-agent seeds; every stream of agent `i` is derived from `seeds[i]`.
    pub seeds: Vec<u64>,
}

impl ParticleSet {
    pub fn init(config: &TrainConfig, env: &dyn Environment, seeds: &[u64]) -> Result<Self> {
        let info = env.info();
        let spec = NetSpec::mlp(info.obs_dim, &config.hidden, info.action_dim)?;
        let mut set = ParticleSet {
            policies: vec![],
            critics: vec![],
            adam_states: vec![],
            seeds: seeds.to_vec(),
        };
        for &s in seeds {
            let policy = GaussianPolicy::init(spec.clone(), &mut stream(s, 0, Purpose::PolicyInit, 0));
            set.adam_states.push(AdamState::new(policy.params.len(), config.policy_step_size));
            set.policies.push(policy);
            set.critics.push(if config.estimator.kind.uses_critic() {
                Some(CriticNet::init(
                    info.obs_dim,
                    &config.hidden,
                    config.critic_step_size,
                    &mut stream(s, 0, Purpose::CriticInit, 0),
                )?)
            } else {
                None
            });
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

/// How particles interact in the Stein update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// RBF kernel with median-heuristic bandwidth.
    #[default]
    Rbf,
    /// Gram `n * I` and zero kernel gradients: no interaction at all.
    Decoupled,
}

/// One row of run metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub transitions: usize,
    pub cumulative_transitions: usize,
    pub episodes: usize,
    pub cumulative_episodes: usize,
    /// Training transitions consumed by each agent.
    pub agent_transitions: Vec<usize>,
    pub mean_train_return: f64,
    /// Evaluated return of each agent after this iteration's update.
    pub particle_returns: Vec<f64>,
    pub mean_eval_return: Option<f64>,
    pub best_eval_return: Option<f64>,
    pub best_particle: Option<usize>,
    /// Gradient sample count summed over agents.
    pub grad_samples: usize,
    /// Mean norm of the raw utility gradients.
    pub grad_norm: f64,
    /// Mean norm of the Stein directions.
    pub direction_norm: Option<f64>,
    pub bandwidth: Option<f64>,
    pub mean_offdiag_gram: Option<f64>,
    pub repulsion_ratio: Option<f64>,
    pub alpha: Option<f64>,
    pub critic_loss: Option<f64>,
}

/// Everything a completed run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
    /// Final evaluation of every agent.
    pub final_returns: Vec<f64>,
    pub best_particle: Option<usize>,
    pub best_test_return: Option<f64>,
    pub mean_test_return: Option<f64>,
    pub episodes_to_95: Option<usize>,
}

struct AgentOutcome {
    gradient: Vec<f64>,
    samples: usize,
    transitions: usize,
    episodes: usize,
    train_return: f64,
    critic_loss: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_return(trajs: &[Trajectory]) -> f64 {
    trajs.iter().map(Trajectory::total_reward).sum::<f64>() / trajs.len() as f64
}

/// Mean undiscounted return over whole episodes, run until at least
/// `budget` transitions have been taken.
pub fn evaluate(policy: &GaussianPolicy, env: &dyn Environment, budget: usize, rng: &mut RngStream) -> Result<f64> {
    Ok(mean_return(&collect(env, policy, budget, rng)?))
}

/// Index of the largest evaluation; ties go to the lowest index.
pub fn select_best(evaluations: &[f64]) -> Result<usize> {
    if evaluations.is_empty() {
        return Err(Error::Empty("particle evaluations"));
    }
    let mut best = 0;
    for (i, v) in evaluations.iter().enumerate().skip(1) {
        if *v > evaluations[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Cumulative training episodes at the first iteration whose best evaluated
/// return is within `1 - fraction` of the run's maximum, i.e. at least
/// `max - (1 - fraction) * |max|`.
pub fn episodes_to_threshold(records: &[IterationRecord], fraction: f64) -> Result<Option<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let scored: Vec<(f64, usize)> = records
        .iter()
        .filter_map(|r| r.best_eval_return.map(|b| (b, r.cumulative_episodes)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Empty("evaluated iterations"));
    }
    let max = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - (1.0 - fraction) * max.abs();
    Ok(scored.iter().find(|s| s.0 >= threshold).map(|s| s.1))
}

/// Runs a configured regime step by step.
pub struct Trainer {
    config: TrainConfig,
    env: Box<dyn Environment>,
    particles: ParticleSet,
    kernel_mode: KernelMode,
    pool: Option<rayon::ThreadPool>,
    iteration: usize,
    cumulative_transitions: usize,
    cumulative_episodes: usize,
    records: Vec<IterationRecord>,
}

impl Trainer {
    /// Agent seeds derived from the master seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let seeds: Vec<u64> = (0..config.agents()).map(|i| particle_seed(config.seed, i)).collect();
        Self::with_seeds(config, &seeds)
    }

    /// Explicit per-agent seeds; `seeds.len()` must equal the agent count.
    pub fn with_seeds(config: TrainConfig, seeds: &[u64]) -> Result<Self> {
        config.validate()?;
        if seeds.len() != config.agents() {
            return Err(Error::Config(format!(
                "{} regime with {} particles needs {} seeds, got {}",
                config.regime.as_str(),
                config.particles,
                config.agents(),
                seeds.len()
            )));
        }
        let env = config.env.build();
        let particles = ParticleSet::init(&config, env.as_ref(), seeds)?;
        Ok(Trainer {
            config,
            env,
            particles,
            kernel_mode: KernelMode::Rbf,
            pool: None,
            iteration: 0,
            cumulative_transitions: 0,
            cumulative_episodes: 0,
            records: vec![],
        })
    }

    /// Caps the number of concurrent agent workers. Results are unaffected.
    pub fn set_workers(&mut self, workers: usize) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        self.pool = Some(pool);
        Ok(())
    }

    pub fn set_kernel_mode(&mut self, mode: KernelMode) {
        self.kernel_mode = mode;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn agent_gradient(
        config: &TrainConfig,
        env: &dyn Environment,
        policy: &GaussianPolicy,
        critic: Option<&mut CriticNet>,
        seed: u64,
        iteration: usize,
    ) -> Result<AgentOutcome> {
        let est = &config.estimator;
        let chunks = match config.regime {
            Regime::Joint => config.particles,
            _ => 1,
        };
        if est.kind == EstimatorKind::Es {
            let evals = est.es_perturbations * if est.es_antithetic { 2 } else { 1 };
            let budget = (chunks * config.transitions).div_ceil(evals).max(1);
            let (mut transitions, mut episodes, mut total) = (0, 0, 0.0);
            let utility = |point: &[f64], k: usize| -> Result<f64> {
                let probe = GaussianPolicy::from_params(policy.spec().clone(), ParamVector(point.to_vec()))?;
                let trajs = collect(env, &probe, budget, &mut stream(seed, iteration, Purpose::Rollout, k))?;
                transitions += transition_count(&trajs);
                episodes += trajs.len();
                let j = mean_return(&trajs);
                total += j;
                Ok(j)
            };
            let mut rng = stream(seed, iteration, Purpose::Perturbation, 0);
            let g = es_gradient(utility, policy.params.as_slice(), est.es_perturbations, est.es_step, est.es_antithetic, &mut rng)?;
            return Ok(AgentOutcome {
                samples: g.samples,
                gradient: g.values,
                transitions,
                episodes,
                train_return: total / evals as f64,
                critic_loss: None,
            });
        }

        let mut trajs = Vec::new();
        for c in 0..chunks {
            let mut rng = stream(seed, iteration, Purpose::Rollout, c);
            trajs.extend(collect(env, policy, config.transitions, &mut rng)?);
        }
        let transitions = transition_count(&trajs);
        let train_return = mean_return(&trajs);
        let mut fit_rng = stream(seed, iteration, Purpose::CriticFit, 0);
        let (gradient, critic_loss) = match (est.kind, critic) {
            (EstimatorKind::Reinforce, _) => (reinforce_gradient(&trajs, policy, est.gamma)?, None),
            (EstimatorKind::ReinforceBaseline, Some(critic)) => {
                let values = critic.episode_values(&trajs)?;
                let baselines: Vec<Vec<f64>> = values.into_iter().map(|v| v.values).collect();
                let g = baseline_gradient(&trajs, policy, &baselines, est.gamma)?;
                let targets = trajs
                    .iter()
                    .map(|t| discounted_returns(&t.rewards, est.gamma, t.terminal, 0.0))
                    .collect::<Result<Vec<_>>>()?;
                let rep = critic_fit_targets(critic, &trajs, &targets, config.critic_epochs, &mut fit_rng)?;
                (g, Some(rep.final_loss))
            }
            (EstimatorKind::A2c, Some(critic)) => {
                let out = a2c_gradient(&trajs, policy, critic, est.gamma, est.lambda, est.normalize_advantages)?;
                let rep = critic_fit_targets(critic, &trajs, &out.returns, config.critic_epochs, &mut fit_rng)?;
                (out.gradient, Some(rep.final_loss))
            }
            (kind, None) => {
                return Err(Error::Config(format!("estimator {} needs a critic", kind.as_str())));
            }
            (EstimatorKind::Es, Some(_)) => unreachable!("handled above"),
        };
        Ok(AgentOutcome {
            samples: gradient.samples,
            gradient: gradient.values,
            transitions,
            episodes: trajs.len(),
            train_return,
            critic_loss,
        })
    }

    /// Runs one iteration and returns its metrics row.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let iteration = self.iteration;
        let config = &self.config;
        let env = self.env.as_ref();
        let ParticleSet {
            policies,
            critics,
            seeds,
            ..
        } = &mut self.particles;
        let policies_ref: &[GaussianPolicy] = policies;
        let seeds_ref: &[u64] = seeds;
        let mut job = move || {
            critics
                .par_iter_mut()
                .enumerate()
                .map(|(i, critic)| {
                    Self::agent_gradient(config, env, &policies_ref[i], critic.as_mut(), seeds_ref[i], iteration)
                        .map_err(|e| e.in_particle(i))
                })
                .collect::<Vec<_>>()
        };
        let outcomes = match &self.pool {
            Some(pool) => pool.install(job),
            None => job(),
        };
        let outcomes: Vec<AgentOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

        let mut grads: Vec<Vec<f64>> = outcomes.iter().map(|o| o.gradient.clone()).collect();
        let grad_norm = mean(&grads.iter().map(|g| norm(g)).collect::<Vec<_>>());
        let mut record = IterationRecord {
            iteration,
            transitions: outcomes.iter().map(|o| o.transitions).sum(),
            cumulative_transitions: 0,
            episodes: outcomes.iter().map(|o| o.episodes).sum(),
            cumulative_episodes: 0,
            agent_transitions: outcomes.iter().map(|o| o.transitions).collect(),
            mean_train_return: mean(&outcomes.iter().map(|o| o.train_return).collect::<Vec<_>>()),
            particle_returns: vec![],
            mean_eval_return: None,
            best_eval_return: None,
            best_particle: None,
            grad_samples: outcomes.iter().map(|o| o.samples).sum(),
            grad_norm,
            direction_norm: None,
            bandwidth: None,
            mean_offdiag_gram: None,
            repulsion_ratio: None,
            alpha: None,
            critic_loss: None,
        };
        let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.critic_loss).collect();
        if !losses.is_empty() {
            record.critic_loss = Some(mean(&losses));
        }

        let directions = if self.config.regime == Regime::Svpg {
            if let Some(c) = self.config.svpg.max_grad_norm {
                for g in &mut grads {
                    clip_norm(g, c);
                }
            }
            let alpha = anneal_alpha(&self.config.svpg, iteration);
            let params: Vec<&[f64]> = self.particles.policies.iter().map(|p| p.params.as_slice()).collect();
            let kernel = match self.kernel_mode {
                KernelMode::Rbf => KernelEval::rbf(&params, median_bandwidth(&params)?)?,
                KernelMode::Decoupled => KernelEval::decoupled(params.len(), params[0].len()),
            };
            let stein = svpg_direction_with_kernel(&kernel, &grads, None, alpha)?;
            record.alpha = Some(alpha);
            record.bandwidth = Some(kernel.bandwidth);
            record.mean_offdiag_gram = kernel.mean_offdiag();
            record.repulsion_ratio = stein.repulsion_ratio();
            record.direction_norm = Some(mean(&stein.directions.iter().map(|d| norm(d)).collect::<Vec<_>>()));
            stein.directions
        } else {
            grads
        };

        for (i, dir) in directions.iter().enumerate() {
            let (policy, adam) = (&mut self.particles.policies[i], &mut self.particles.adam_states[i]);
            adam.step(policy.params.as_mut_slice(), dir, true).map_err(|e| e.in_particle(i))?;
            if policy.min_std() < SMALL_STD {
                log::warn!("particle {i}: policy standard deviation fell to {:e}", policy.min_std());
            }
        }

        if self.config.eval_transitions > 0 {
            let budget = self.config.eval_transitions;
            let returns = self.evaluate_all(Purpose::Evaluation, iteration, budget)?;
            let best = select_best(&returns)?;
            record.mean_eval_return = Some(mean(&returns));
            record.best_eval_return = Some(returns[best]);
            record.best_particle = Some(best);
            record.particle_returns = returns;
        }

        self.cumulative_transitions += record.transitions;
        self.cumulative_episodes += record.episodes;
        record.cumulative_transitions = self.cumulative_transitions;
        record.cumulative_episodes = self.cumulative_episodes;
        let per_agent = self.config.transitions
            * if self.config.regime == Regime::Joint { self.config.particles } else { 1 };
        let cap = per_agent + self.config.particles * self.env.info().max_episode_length;
        for (i, t) in record.agent_transitions.iter().enumerate() {
            if *t < per_agent || *t >= cap {
                log::warn!("iteration {iteration}: agent {i} consumed {t} transitions, outside [{per_agent}, {cap})");
            }
        }
        self.iteration += 1;
        self.records.push(record.clone());
        Ok(record)
    }

    /// Evaluates every agent with streams `(seed_i, iteration, purpose, 0)`.
    pub fn evaluate_all(&self, purpose: Purpose, iteration: usize, budget: usize) -> Result<Vec<f64>> {
        let env = self.env.as_ref();
        let policies = &self.particles.policies;
        let seeds = &self.particles.seeds;
        self.run(|| {
            policies
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    evaluate(p, env, budget, &mut stream(seeds[i], iteration, purpose, 0)).map_err(|e| e.in_particle(i))
                })
                .collect::<Result<Vec<f64>>>()
        })
    }

    /// Runs the remaining iterations and the final evaluation.
    pub fn run_to_end(mut self) -> Result<RunMetrics> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    /// Final evaluation and summary statistics of the iterations run so far.
    pub fn finish(&self) -> Result<RunMetrics> {
        let mut metrics = RunMetrics {
            records: self.records.clone(),
            final_returns: vec![],
            best_particle: None,
            best_test_return: None,
            mean_test_return: None,
            episodes_to_95: None,
        };
        if self.records.iter().any(|r| r.best_eval_return.is_some()) {
            metrics.episodes_to_95 = episodes_to_threshold(&self.records, 0.95)?;
        }
        if self.config.final_eval_transitions > 0 {
            let returns = self.evaluate_all(Purpose::FinalEvaluation, self.iteration, self.config.final_eval_transitions)?;
            let best = select_best(&returns)?;
            metrics.best_particle = Some(best);
            metrics.best_test_return = Some(returns[best]);
            metrics.mean_test_return = Some(mean(&returns));
            metrics.final_returns = returns;
        }
        Ok(metrics)
    }
}

fn with_regime(mut config: TrainConfig, regime: Regime) -> Result<RunMetrics> {
    config.regime = regime;
    Trainer::new(config)?.run_to_end()
}

/// Stein variational policy gradient over `config.particles` particles.
pub fn train_svpg(config: TrainConfig) -> Result<RunMetrics> {
    with_regime(config, Regime::Svpg)
}

/// `config.particles` uncoupled learners.
pub fn train_independent(config: TrainConfig) -> Result<RunMetrics> {
    with_regime(config, Regime::Independent)
}

/// One learner with `config.particles * config.transitions` transitions per
/// iteration.
pub fn train_joint(config: TrainConfig) -> Result<RunMetrics> {
    with_regime(config, Regime::Joint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(best: f64, cum_episodes: usize) -> IterationRecord {
        IterationRecord {
            iteration: 0,
            transitions: 0,
            cumulative_transitions: 0,
            episodes: 0,
            cumulative_episodes: cum_episodes,
            agent_transitions: vec![],
            mean_train_return: 0.0,
            particle_returns: vec![best],
            mean_eval_return: Some(best),
            best_eval_return: Some(best),
            best_particle: Some(0),
            grad_samples: 0,
            grad_norm: 0.0,
            direction_norm: None,
            bandwidth: None,
            mean_offdiag_gram: None,
            repulsion_ratio: None,
            alpha: None,
            critic_loss: None,
        }
    }

    #[test]
    fn best_selection() {
        assert_eq!(select_best(&[5.0]).unwrap(), 0);
        assert_eq!(select_best(&[3.0, 7.0, 7.0, 1.0]).unwrap(), 1);
        assert_eq!(select_best(&[0.3, 0.7, 0.7, 0.1]).unwrap(), 1);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn threshold_episodes() {
        let rs = vec![record(10.0, 10), record(50.0, 20), record(100.0, 30)];
        assert_eq!(episodes_to_threshold(&rs, 0.95).unwrap(), Some(30));
        assert_eq!(episodes_to_threshold(&rs, 1.0).unwrap(), Some(30));
        assert_eq!(episodes_to_threshold(&rs, 0.5).unwrap(), Some(20));
        let flat = vec![record(4.0, 7), record(4.0, 14)];
        assert_eq!(episodes_to_threshold(&flat, 0.95).unwrap(), Some(7));
        let negative = vec![record(-100.0, 5), record(-20.0, 10), record(-19.5, 15)];
        assert_eq!(episodes_to_threshold(&negative, 0.95).unwrap(), Some(10));
        assert!(episodes_to_threshold(&[], 0.95).is_err());
    }

    #[test]
    fn seed_count_must_match() {
        let c = TrainConfig::new(EnvId::Cartpole, Regime::Independent, 2, 10, 1, 0);
        assert!(Trainer::with_seeds(c, &[1]).is_err());
    }
}
