//! Oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use svpg::envs::{EnvInfo, EnvState, Environment, StepResult};
use svpg::net::{self, NetSpec};
use svpg::policy::GaussianPolicy;
use svpg::rng::{stream, Purpose};
use svpg::svgd::{median_bandwidth, svpg_direction};

/// Reward of the one-step oracle problem as a function of the action.
#[derive(Debug, Clone, Copy)]
pub enum Payoff {
    /// `r(a) = a + offset`.
    Linear { offset: f64 },
    /// `r(a) = 1` when `a > threshold`, else 0: two effective actions.
    Step { threshold: f64 },
}

impl Payoff {
    pub fn reward(self, a: f64) -> f64 {
        match self {
            Payoff::Linear { offset } => a + offset,
            Payoff::Step { threshold } => f64::from(u8::from(a > threshold)),
        }
    }
}

pub const BANDIT_OBS: [f64; 2] = [0.4, -0.8];

/// A one-step episodic problem with a fixed observation. Actions are
/// practically unbounded so that clipping never biases the oracle.
pub struct Bandit(pub Payoff);

impl Environment for Bandit {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 2,
            action_dim: 1,
            action_low: vec![-1e9],
            action_high: vec![1e9],
            max_episode_length: 1,
        }
    }

    fn perturbation_dim(&self) -> usize {
        0
    }

    fn initial_state(&self, _: &[f64]) -> EnvState {
        EnvState {
            observation: BANDIT_OBS.to_vec(),
            internal: BANDIT_OBS.to_vec(),
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        StepResult {
            next_state: EnvState {
                observation: s.to_vec(),
                internal: s.to_vec(),
            },
            reward: self.0.reward(action[0]),
            terminal: true,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// Every step pays nothing; episodes last 7 steps.
pub struct Silent;

impl Environment for Silent {
    fn info(&self) -> EnvInfo {
        EnvInfo {
            obs_dim: 3,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_episode_length: 7,
        }
    }

    fn perturbation_dim(&self) -> usize {
        3
    }

    fn initial_state(&self, u: &[f64]) -> EnvState {
        EnvState {
            observation: u.to_vec(),
            internal: u.to_vec(),
        }
    }

    fn dynamics(&self, s: &[f64], action: &[f64]) -> StepResult {
        let next: Vec<f64> = s.iter().zip(action.iter().cycle()).map(|(x, a)| 0.9 * x + 0.1 * a).collect();
        StepResult {
            next_state: EnvState {
                observation: next.clone(),
                internal: next,
            },
            reward: 0.0,
            terminal: false,
        }
    }

    fn constants(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// A small policy for the bandit with a chosen log standard deviation.
pub fn bandit_policy(seed: u64, log_std: f64) -> GaussianPolicy {
    let spec = NetSpec::mlp(2, &[5], 1).unwrap();
    let mut p = GaussianPolicy::init(spec, &mut stream(seed, 0, Purpose::PolicyInit, 0));
    p.log_std_mut()[0] = log_std;
    p
}

/// Gradient of the policy mean at the bandit observation with respect to
/// the mean-network parameters, by central finite differences on the
/// forward pass.
pub fn mean_gradient_fd(policy: &GaussianPolicy) -> Vec<f64> {
    let spec = policy.spec();
    let count = spec.param_count();
    let mut theta = policy.params.as_slice()[..count].to_vec();
    let mut g = vec![0.0; count];
    for k in 0..count {
        let eps = 1e-6 * theta[k].abs().max(1.0);
        let orig = theta[k];
        theta[k] = orig + eps;
        let up = net::forward(spec, &theta, &BANDIT_OBS).unwrap()[0];
        theta[k] = orig - eps;
        let down = net::forward(spec, &theta, &BANDIT_OBS).unwrap()[0];
        theta[k] = orig;
        g[k] = (up - down) / (2.0 * eps);
    }
    g
}

/// Composite Simpson rule on `[a, b]` with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for k in 1..intervals {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Exact gradient of `J = E[r(a)]` for a one-step Gaussian policy: the
/// derivatives with respect to the mean and the log standard deviation are
/// integrated by quadrature, then chained through the mean network.
pub fn bandit_gradient_quadrature(policy: &GaussianPolicy, payoff: Payoff) -> Vec<f64> {
    let mu = policy.mean(&BANDIT_OBS).unwrap()[0];
    let sigma = policy.log_std()[0].exp();
    let density = |a: f64| {
        let z = (a - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let integrate = |f: &dyn Fn(f64) -> f64| -> f64 {
        match payoff {
            // Split at the discontinuity so that Simpson stays accurate.
            Payoff::Step { threshold } if threshold > lo && threshold < hi => {
                simpson(f, lo, threshold, 20_000) + simpson(f, threshold, hi, 20_000)
            }
            _ => simpson(f, lo, hi, 40_000),
        }
    };
    let d_mu = integrate(&|a| payoff.reward(a) * density(a) * (a - mu) / (sigma * sigma));
    let d_log_sigma = integrate(&|a| {
        let z = (a - mu) / sigma;
        payoff.reward(a) * density(a) * (z * z - 1.0)
    });
    let mut g: Vec<f64> = mean_gradient_fd(policy).iter().map(|v| v * d_mu).collect();
    g.push(d_log_sigma);
    g
}

/// Per-coordinate sample mean and standard error.
pub fn mean_and_se(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m) / (n - 1.0);
        }
    }
    let se = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, se)
}

/// Sum over coordinates of the per-coordinate sample variance.
pub fn total_variance(samples: &[Vec<f64>]) -> f64 {
    let (_, se) = mean_and_se(samples);
    let n = samples.len() as f64;
    se.iter().map(|s| s * s * n).sum()
}

/// Coordinates whose sample mean lies more than `k` standard errors from
/// the reference, as `(index, mean, reference, se)`.
pub fn outliers(samples: &[Vec<f64>], reference: &[f64], k: f64) -> Vec<(usize, f64, f64, f64)> {
    let (mean, se) = mean_and_se(samples);
    mean.iter()
        .zip(&se)
        .zip(reference)
        .enumerate()
        .filter(|(_, ((m, s), r))| (*m - *r).abs() > k * **s)
        .map(|(i, ((m, s), r))| (i, *m, *r, *s))
        .collect()
}

/// Direct double loop over the Stein direction with an RBF kernel and flat
/// prior, written independently of the library.
pub fn brute_force_direction(particles: &[Vec<f64>], grads: &[Vec<f64>], alpha: f64, h: f64) -> Vec<Vec<f64>> {
    let n = particles.len();
    let d = particles[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let sq: f64 = (0..d).map(|c| (particles[j][c] - particles[i][c]).powi(2)).sum();
            let k = (-sq / h).exp();
            for c in 0..d {
                let grad_k = -2.0 / h * (particles[j][c] - particles[i][c]) * k;
                out[i][c] += (grads[j][c] / alpha * k + grad_k) / n as f64;
            }
        }
    }
    out
}

/// Score of the equal-weight mixture of N(-2, 1) and N(2, 1).
pub fn mixture_score(x: f64) -> f64 {
    let a = (-0.5 * (x + 2.0) * (x + 2.0)).exp();
    let b = (-0.5 * (x - 2.0) * (x - 2.0)).exp();
    (-(x + 2.0) * a - (x - 2.0) * b) / (a + b)
}

/// Transports `n` particles towards the two-mode mixture with plain SVGD
/// steps (temperature 1, median bandwidth every step).
pub fn svgd_mixture(n: usize, steps: usize, step_size: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, 0, Purpose::PolicyInit, 0);
    let mut xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
    for _ in 0..steps {
        let h = median_bandwidth(&xs).unwrap();
        let grads: Vec<Vec<f64>> = xs.iter().map(|x| vec![mixture_score(x[0])]).collect();
        let dir = svpg_direction(&xs, &grads, None, 1.0, h).unwrap();
        for (x, d) in xs.iter_mut().zip(&dir.directions) {
            x[0] += step_size * d[0];
        }
    }
    xs.into_iter().map(|x| x[0]).collect()
}

/// Antithetic ES estimates for a sequence of steps, all using the same
/// perturbation draws, together with the `h -> 0` limit for those draws.
/// Returns the distance of each estimate from that limit.
pub fn es_finite_difference_bias(
    utility: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    steps: &[f64],
    directions: usize,
    seed: u64,
) -> Vec<f64> {
    use svpg::estimators::es_gradient;
    let limit = {
        let mut rng = stream(seed, 0, Purpose::Perturbation, 0);
        let g = gradient(theta);
        let mut acc = vec![0.0; theta.len()];
        for _ in 0..directions {
            let xi: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
            let dot: f64 = g.iter().zip(&xi).map(|(a, b)| a * b).sum();
            for (a, x) in acc.iter_mut().zip(&xi) {
                *a += dot * x / directions as f64;
            }
        }
        acc
    };
    steps
        .iter()
        .map(|&h| {
            let mut rng = stream(seed, 0, Purpose::Perturbation, 0);
            let est = es_gradient(|p, _| Ok(utility(p)), theta, directions, h, true, &mut rng).unwrap();
            est.values
                .iter()
                .zip(&limit)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}
