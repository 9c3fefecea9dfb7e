//! Diagonal-Gaussian policy with a state-independent log standard deviation.
//!
//! The mean is a [`NetSpec`] network of the observation; the parameter
//! vector carries the network block followed by one log standard deviation
//! per action dimension.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, check_len, Error, Result};
use crate::net::{self, BatchTape, GradientEstimate, NetSpec, ParamVector};

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Standard deviations below this trigger a diagnostic warning.
pub const SMALL_STD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    spec: NetSpec,
    pub params: ParamVector,
}

impl GaussianPolicy {
    /// Glorot-initialized mean network, `log_std = 0`.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let mut values = spec.init_params(rng);
        values.extend(std::iter::repeat_n(0.0, spec.output_size()));
        GaussianPolicy {
            spec,
            params: ParamVector(values),
        }
    }

    pub fn from_params(spec: NetSpec, params: ParamVector) -> Result<Self> {
        check_len(
            "policy parameters",
            spec.param_count() + spec.output_size(),
            params.len(),
        )?;
        check_finite("policy parameters", params.as_slice())?;
        Ok(GaussianPolicy { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_size()
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_size()
    }

    fn net_params(&self) -> &[f64] {
        &self.params.0[..self.spec.param_count()]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params.0[self.spec.param_count()..]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let n = self.spec.param_count();
        &mut self.params.0[n..]
    }

    pub fn min_std(&self) -> f64 {
        self.log_std()
            .iter()
            .map(|l| l.exp())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mu = net::forward(&self.spec, self.net_params(), obs)?;
        check_finite("policy mean", &mu)?;
        Ok(mu)
    }

    fn log_density(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(log_std)
            .zip(action)
            .map(|((m, ls), a)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LOG_TWO_PI
            })
            .sum()
    }

    /// Log-density of `action` at `obs`.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        check_len("action", self.action_dim(), action.len())?;
        let mu = self.mean(obs)?;
        Ok(Self::log_density(&mu, self.log_std(), action))
    }

    /// `action = mean + std * noise` and its log-density.
    pub fn act_with_noise(&self, obs: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean(obs)?;
        self.act_from_mean(&mu, noise)
    }

    /// Like [`GaussianPolicy::act_with_noise`] with the mean already computed.
    pub fn act_from_mean(&self, mean: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("policy noise", self.action_dim(), noise.len())?;
        check_len("policy mean", self.action_dim(), mean.len())?;
        let log_std = self.log_std();
        check_finite("policy log std", log_std)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(log_std)
            .zip(noise)
            .map(|((m, ls), z)| m + ls.exp() * z)
            .collect();
        let lp = Self::log_density(mean, log_std, &action);
        Ok((action, lp))
    }

    /// Draws an action (before any environment clipping) and its log-density.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let noise: Vec<f64> = (0..self.action_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.act_with_noise(obs, &noise)
    }

    /// Exact gradient of `log_prob(obs, action)` with respect to all
    /// parameters, log standard deviations included.
    pub fn log_prob_grad(&self, obs: &[f64], action: &[f64]) -> Result<GradientEstimate> {
        check_len("action", self.action_dim(), action.len())?;
        let mu = self.mean(obs)?;
        let log_std = self.log_std();
        let mut cot = Vec::with_capacity(mu.len());
        let mut std_grad = Vec::with_capacity(mu.len());
        for ((m, ls), a) in mu.iter().zip(log_std).zip(action) {
            let sigma = ls.exp();
            let z = (a - m) / sigma;
            cot.push(z / sigma);
            std_grad.push(z * z - 1.0);
        }
        let mut g = net::backward(&self.spec, self.net_params(), obs, &cot)?;
        g.values.extend(std_grad);
        Ok(g)
    }

    /// Means for a batch of observations laid out back to back.
    pub fn mean_batch(&self, observations: &[f64]) -> Result<Vec<f64>> {
        let tape = BatchTape::forward(&self.spec, self.net_params(), observations)?;
        check_finite("policy mean", tape.outputs())?;
        Ok(tape.outputs().to_vec())
    }

    /// `sum_t weight_t * grad log pi(action_t | obs_t)` over a batch, computed
    /// with one batched backward pass.
    pub fn weighted_score(
        &self,
        observations: &[f64],
        actions: &[f64],
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let d = self.action_dim();
        check_len("batched actions", weights.len() * d, actions.len())?;
        check_len(
            "batched observations",
            weights.len() * self.obs_dim(),
            observations.len(),
        )?;
        let tape = BatchTape::forward(&self.spec, self.net_params(), observations)?;
        let mu = tape.outputs();
        check_finite("policy mean", mu)?;
        let log_std = self.log_std();
        let mut cot = vec![0.0; mu.len()];
        let mut std_grad = vec![0.0; d];
        for (t, w) in weights.iter().enumerate() {
            for k in 0..d {
                let sigma = log_std[k].exp();
                let z = (actions[t * d + k] - mu[t * d + k]) / sigma;
                cot[t * d + k] = w * z / sigma;
                std_grad[k] += w * (z * z - 1.0);
            }
        }
        let mut g = tape.backward(&self.spec, self.net_params(), &cot)?;
        g.extend(std_grad);
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("policy score (entry {k})")));
        }
        Ok(g)
    }
}
