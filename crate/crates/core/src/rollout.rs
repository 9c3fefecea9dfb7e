//! Whole-episode trajectory collection, discounted returns and GAE.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;

use crate::envs::{EnvState, Environment};
use crate::error::{check_len, Error, Result};
use crate::policy::GaussianPolicy;
use crate::rng::RngStream;

/// One episode. Per-step quantities are stored flat, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `len() x obs_dim` observations the actions were taken in.
    pub observations: Vec<f64>,
    /// Full simulator states matching `observations`, row by row.
    pub internal_states: Vec<Vec<f64>>,
    /// `len() x action_dim` sampled actions, before clipping.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// True if the episode ended in a terminal state rather than by the
    /// length cap.
    pub terminal: bool,
    /// Observation after the last step; bootstraps truncated episodes.
    pub final_observation: Vec<f64>,
    /// Critic estimates `V(s_t)`, when a critic has been evaluated.
    pub values: Option<Vec<f64>>,
    /// Fingerprint of the policy parameters that generated the episode.
    pub policy_fingerprint: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

fn empty_trajectory(obs_dim: usize, action_dim: usize, fingerprint: u64) -> Trajectory {
    Trajectory {
        obs_dim,
        action_dim,
        observations: vec![],
        internal_states: vec![],
        actions: vec![],
        rewards: vec![],
        log_probs: vec![],
        terminal: false,
        final_observation: vec![],
        values: None,
        policy_fingerprint: fingerprint,
    }
}

fn check_dims(env: &dyn Environment, policy: &GaussianPolicy) -> Result<()> {
    let info = env.info();
    check_len("policy observation size", info.obs_dim, policy.obs_dim())?;
    check_len("policy action size", info.action_dim, policy.action_dim())
}

/// Appends one transition; returns true when the episode is over.
fn record_step(
    env: &dyn Environment,
    traj: &mut Trajectory,
    state: &mut EnvState,
    action: Vec<f64>,
    log_prob: f64,
    cap: usize,
) -> Result<bool> {
    let step = env.step(state, &action)?;
    if !step.reward.is_finite() {
        return Err(Error::NonFinite("reward".into()));
    }
    traj.observations.extend_from_slice(&state.observation);
    traj.internal_states.push(std::mem::take(&mut state.internal));
    traj.actions.extend(action);
    traj.rewards.push(step.reward);
    traj.log_probs.push(log_prob);
    *state = step.next_state;
    traj.terminal = step.terminal;
    let done = step.terminal || traj.len() >= cap;
    if done {
        traj.final_observation = state.observation.clone();
    }
    Ok(done)
}

fn noise(rng: &mut RngStream, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs one episode from reset to a terminal state or the length cap.
pub fn run_episode(
    env: &dyn Environment,
    policy: &GaussianPolicy,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    check_dims(env, policy)?;
    let info = env.info();
    let mut traj = empty_trajectory(info.obs_dim, info.action_dim, policy.params.fingerprint());
    let mut state = env.reset(rng);
    loop {
        let z = noise(rng, info.action_dim);
        let (action, log_prob) = policy.act_with_noise(&state.observation, &z)?;
        if record_step(env, &mut traj, &mut state, action, log_prob, info.max_episode_length)? {
            return Ok(traj);
        }
    }
}

/// Most episodes advanced together by [`collect`].
pub const MAX_LOCKSTEP: usize = 16;

struct Running {
    index: usize,
    rng: RngStream,
    state: EnvState,
    traj: Trajectory,
}

/// Collects whole episodes until at least `budget` transitions have been
/// gathered. The last episode is kept even when it overshoots.
///
/// Episode `k` draws from its own generator, seeded by the `k`-th draw from
/// `rng`, and the result is exactly the shortest prefix of episodes
/// `0, 1, 2, ..` that reaches the budget. Internally several episodes run
/// in lockstep so that policy means are evaluated in batches; episodes that
/// turn out to lie beyond the prefix are abandoned.
pub fn collect(
    env: &dyn Environment,
    policy: &GaussianPolicy,
    budget: usize,
    rng: &mut RngStream,
) -> Result<Vec<Trajectory>> {
    if budget == 0 {
        return Err(Error::Config("sample budget must be at least 1".into()));
    }
    check_dims(env, policy)?;
    let info = env.info();
    let cap = info.max_episode_length;
    let fingerprint = policy.params.fingerprint();
    // Steps taken so far by every launched episode, in launch order.
    let mut steps: Vec<usize> = vec![];
    let mut done: Vec<Option<Trajectory>> = vec![];
    let mut running: Vec<Running> = vec![];
    let mut obs = Vec::new();
    loop {
        // First episode index whose predecessors already cover the budget.
        let mut prefix = 0;
        let mut needed = steps.len();
        for (k, s) in steps.iter().enumerate() {
            if prefix >= budget {
                needed = k;
                break;
            }
            prefix += s;
        }
        running.retain(|r| r.index < needed);
        if needed == steps.len() && prefix < budget {
            let finished: Vec<usize> = done.iter().flatten().map(Trajectory::len).collect();
            let typical = if finished.is_empty() {
                cap
            } else {
                finished.iter().sum::<usize>().div_ceil(finished.len())
            };
            let mut projected: usize = finished.iter().sum::<usize>()
                + running.iter().map(|r| r.traj.len().max(typical)).sum::<usize>();
            while running.len() < MAX_LOCKSTEP && (projected < budget || running.is_empty()) {
                let index = steps.len();
                let mut ep_rng = RngStream::seed_from_u64(rng.next_u64());
                let state = env.reset(&mut ep_rng);
                steps.push(0);
                done.push(None);
                running.push(Running {
                    index,
                    rng: ep_rng,
                    state,
                    traj: empty_trajectory(info.obs_dim, info.action_dim, fingerprint),
                });
                projected += typical;
            }
        }
        if running.is_empty() {
            break;
        }
        obs.clear();
        for r in &running {
            obs.extend_from_slice(&r.state.observation);
        }
        let means = policy.mean_batch(&obs)?;
        let d = info.action_dim;
        let mut still = Vec::with_capacity(running.len());
        for (slot, mut r) in running.drain(..).enumerate() {
            let z = noise(&mut r.rng, d);
            let step = policy
                .act_from_mean(&means[slot * d..(slot + 1) * d], &z)
                .and_then(|(a, lp)| record_step(env, &mut r.traj, &mut r.state, a, lp, cap))
                .map_err(|e| e.in_episode(r.index))?;
            steps[r.index] += 1;
            if step {
                done[r.index] = Some(r.traj);
            } else {
                still.push(r);
            }
        }
        running = still;
    }
    let mut out = Vec::new();
    let mut total = 0;
    for slot in done {
        if total >= budget {
            break;
        }
        let traj = slot.expect("every episode in the prefix ran to completion");
        total += traj.len();
        out.push(traj);
    }
    Ok(out)
}

pub fn transition_count(trajectories: &[Trajectory]) -> usize {
    trajectories.iter().map(Trajectory::len).sum()
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// `R_t = r_t + gamma * R_{t+1}`, where the value after the last step is 0
/// for terminal episodes and `bootstrap` otherwise.
pub fn discounted_returns(rewards: &[f64], gamma: f64, terminal: bool, bootstrap: f64) -> Result<Vec<f64>> {
    check_unit("gamma", gamma)?;
    let mut next = if terminal { 0.0 } else { bootstrap };
    let mut out = vec![0.0; rewards.len()];
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        next = r + gamma * next;
        *o = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRecord {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// The GAE backward recursion `A_t = delta_t + gamma * lambda * A_{t+1}`.
pub fn gae_recursion(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    terminal: bool,
    bootstrap: f64,
) -> Result<Vec<f64>> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    check_len("values", rewards.len(), values.len())?;
    let decay = gamma * lambda;
    let mut next_value = if terminal { 0.0 } else { bootstrap };
    let mut acc = 0.0;
    let mut out = vec![0.0; rewards.len()];
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + decay * acc;
        out[t] = acc;
        next_value = values[t];
    }
    Ok(out)
}

/// Generalized advantage estimates with the matching returns.
///
/// At `lambda = 1` the recursion telescopes to `R_t - V(s_t)`, which is
/// evaluated directly.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    terminal: bool,
    bootstrap: f64,
) -> Result<AdvantageRecord> {
    check_unit("lambda", lambda)?;
    check_len("values", rewards.len(), values.len())?;
    let returns = discounted_returns(rewards, gamma, terminal, bootstrap)?;
    let advantages = if lambda == 1.0 {
        returns.iter().zip(values).map(|(r, v)| r - v).collect()
    } else {
        gae_recursion(rewards, values, gamma, lambda, terminal, bootstrap)?
    };
    Ok(AdvantageRecord {
        returns,
        advantages,
    })
}

/// Standardizes to zero mean and unit variance across the batch.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt() + 1e-8;
    for v in values {
        *v = (*v - mean) / scale;
    }
}

/// Writes one CSV row per visited state:
/// `episode,step,state_0..,obs_0..,action_0..,reward`.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = trajectories.first() else {
        w.flush()?;
        return Ok(());
    };
    let state_dim = first.internal_states.first().map_or(0, Vec::len);
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend((0..state_dim).map(|k| format!("state_{k}")));
    header.extend((0..first.obs_dim).map(|k| format!("obs_{k}")));
    header.extend((0..first.action_dim).map(|k| format!("action_{k}")));
    header.push("reward".into());
    w.write_record(&header)?;
    for (e, traj) in trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            let mut row = vec![e.to_string(), t.to_string()];
            row.extend(traj.internal_states[t].iter().map(f64::to_string));
            row.extend(traj.observation(t).iter().map(f64::to_string));
            row.extend(traj.action(t).iter().map(f64::to_string));
            row.push(traj.rewards[t].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvId, MAX_EPISODE_LENGTH};
    use crate::net::NetSpec;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn small_policy(obs: usize, seed: u64) -> GaussianPolicy {
        GaussianPolicy::init(NetSpec::mlp(obs, &[8], 1).unwrap(), &mut stream(seed, 0, Purpose::PolicyInit, 0))
    }

    #[test]
    fn collect_stops_at_first_covering_prefix() {
        let env = EnvId::Cartpole.build();
        let p = small_policy(4, 1);
        for budget in [1, 7, 50, 333, 1000] {
            let eps = collect(env.as_ref(), &p, budget, &mut stream(2, 0, Purpose::Rollout, 0)).unwrap();
            let total = transition_count(&eps);
            assert!(total >= budget);
            assert!(total - eps.last().unwrap().len() < budget);
            assert!(eps.iter().all(|e| e.terminal || e.len() == MAX_EPISODE_LENGTH));
            assert!(eps.iter().all(|e| e.observations.len() == 4 * e.len() && e.internal_states.len() == e.len()));
        }
    }

    #[test]
    fn collect_is_budget_consistent() {
        // Episodes do not depend on how many others run alongside them.
        let env = EnvId::Cartpole.build();
        let p = small_policy(4, 3);
        let small = collect(env.as_ref(), &p, 60, &mut stream(4, 0, Purpose::Rollout, 0)).unwrap();
        let large = collect(env.as_ref(), &p, 2000, &mut stream(4, 0, Purpose::Rollout, 0)).unwrap();
        assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn truncated_episodes_keep_their_bootstrap_state() {
        let env = EnvId::DoublePendulum.build();
        let p = small_policy(6, 5);
        let eps = collect(env.as_ref(), &p, 10, &mut stream(6, 0, Purpose::Rollout, 0)).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].len(), MAX_EPISODE_LENGTH);
        assert!(!eps[0].terminal);
        assert_eq!(eps[0].final_observation.len(), 6);
        assert!(collect(env.as_ref(), &p, 0, &mut stream(6, 0, Purpose::Rollout, 0)).is_err());
        assert!(collect(env.as_ref(), &small_policy(4, 5), 10, &mut stream(6, 0, Purpose::Rollout, 0)).is_err());
    }

    #[test]
    fn gamma_zero_gives_rewards() {
        let r = [1.5, -2.0, 3.0];
        assert_eq!(discounted_returns(&r, 0.0, true, 0.0).unwrap(), r.to_vec());
        assert_eq!(discounted_returns(&r, 0.0, false, 9.0).unwrap(), r.to_vec());
    }

    #[test]
    fn suffix_sums() {
        assert_eq!(
            discounted_returns(&[1.0, 1.0, 1.0], 1.0, true, 0.0).unwrap(),
            vec![3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn hand_recursion() {
        let r = discounted_returns(&[1.0, 2.0, 3.0], 0.5, true, 0.0).unwrap();
        assert_eq!(r, vec![2.75, 3.5, 3.0]);
    }

    #[test]
    fn truncated_bootstrap() {
        let r = discounted_returns(&[1.0, 1.0], 0.5, false, 4.0).unwrap();
        assert_eq!(r, vec![1.0 + 0.5 * 3.0, 3.0]);
    }

    #[test]
    fn invalid_discounts() {
        assert!(discounted_returns(&[1.0], 1.5, true, 0.0).is_err());
        assert!(gae_advantages(&[1.0], &[0.0], 0.9, -0.1, true, 0.0).is_err());
        assert!(gae_advantages(&[1.0], &[0.0, 1.0], 0.9, 0.5, true, 0.0).is_err());
    }

    #[test]
    fn lambda_zero_is_td_residual() {
        let r = [1.0, 0.5, -1.0];
        let v = [0.2, 0.4, 0.1];
        let a = gae_advantages(&r, &v, 0.9, 0.0, false, 0.7).unwrap().advantages;
        let expect = [
            r[0] + 0.9 * v[1] - v[0],
            r[1] + 0.9 * v[2] - v[1],
            r[2] + 0.9 * 0.7 - v[2],
        ];
        for (x, y) in a.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn brute_force_double_sum() {
        let r = [0.3, -1.2, 2.0, 0.7, 1.1];
        let v = [0.5, 0.1, -0.4, 0.9, 0.2];
        let (gamma, lambda, boot) = (0.95, 0.7, 0.6);
        for terminal in [true, false] {
            let mut vn = v.to_vec();
            vn.push(if terminal { 0.0 } else { boot });
            let delta: Vec<f64> = (0..5).map(|t| r[t] + gamma * vn[t + 1] - vn[t]).collect();
            let expect: Vec<f64> = (0..5)
                .map(|t| (t..5).map(|l| (gamma * lambda).powi((l - t) as i32) * delta[l]).sum())
                .collect();
            let got = gae_advantages(&r, &v, gamma, lambda, terminal, boot).unwrap().advantages;
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_standardizes() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut v);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn returns_are_linear_in_rewards(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..40),
            c in -5.0f64..5.0,
            gamma in 0.0f64..=1.0,
        ) {
            let base = discounted_returns(&rewards, gamma, true, 0.0).unwrap();
            let scaled: Vec<f64> = rewards.iter().map(|r| c * r).collect();
            let got = discounted_returns(&scaled, gamma, true, 0.0).unwrap();
            for (a, b) in got.iter().zip(&base) {
                prop_assert!((a - c * b).abs() <= 1e-9 * (1.0 + b.abs() * c.abs()));
            }
        }

        #[test]
        fn gae_lambda_one_telescopes(
            rv in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..60),
            gamma in 0.0f64..=1.0,
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let rec = gae_recursion(&r, &v, gamma, 1.0, true, 0.0).unwrap();
            let ret = discounted_returns(&r, gamma, true, 0.0).unwrap();
            for t in 0..r.len() {
                prop_assert!((rec[t] - (ret[t] - v[t])).abs() < 1e-12 * (1.0 + ret[t].abs() + v[t].abs()) * r.len() as f64);
            }
        }
    }
}
