//! Stein variational transport over policy parameter vectors.
//!
//! Particles interact through an RBF kernel whose bandwidth follows the
//! median heuristic. Each particle moves along
//!
//! ```text
//! dtheta_i = (1/n) sum_j [ ((1/alpha) grad J(theta_j) + grad log q0(theta_j)) k(theta_j, theta_i)
//!                          + grad_{theta_j} k(theta_j, theta_i) ]
//! ```
//!
//! The first part (the driver) pulls particles toward high utility, the
//! second (the repulsion) keeps them apart.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::net::norm;

/// Pairwise kernel values and gradients for a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEval {
    /// `gram[j][i] = k(theta_j, theta_i)`.
    pub gram: Vec<Vec<f64>>,
    /// `grads[j][i] = grad_{theta_j} k(theta_j, theta_i)`.
    pub grads: Vec<Vec<Vec<f64>>>,
    pub bandwidth: f64,
}

impl KernelEval {
    /// RBF kernel on every ordered pair.
    pub fn rbf<P: AsRef<[f64]>>(particles: &[P], bandwidth: f64) -> Result<Self> {
        let n = particles.len();
        if n == 0 {
            return Err(Error::Empty("particles"));
        }
        let d = particles[0].as_ref().len();
        for p in particles {
            check_len("particle length", d, p.as_ref().len())?;
        }
        let mut gram = vec![vec![0.0; n]; n];
        let mut grads = vec![vec![Vec::new(); n]; n];
        for j in 0..n {
            gram[j][j] = 1.0;
            grads[j][j] = vec![0.0; d];
            for i in (j + 1)..n {
                let (k, g) = rbf_kernel(particles[j].as_ref(), particles[i].as_ref(), bandwidth)?;
                gram[j][i] = k;
                gram[i][j] = k;
                // The gradient is odd in the separation vector.
                grads[i][j] = g.iter().map(|v| -v).collect();
                grads[j][i] = g;
            }
        }
        Ok(KernelEval {
            gram,
            grads,
            bandwidth,
        })
    }

    /// Gram `n * I` with zero gradients. Under the `1/n` average this turns
    /// the Stein direction into each particle's own scaled utility gradient,
    /// which makes the update collapse onto independent learners.
    pub fn decoupled(n: usize, dim: usize) -> Self {
        let mut gram = vec![vec![0.0; n]; n];
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] = n as f64;
        }
        KernelEval {
            gram,
            grads: vec![vec![vec![0.0; dim]; n]; n],
            bandwidth: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.gram.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.is_empty()
    }

    /// Mean of the off-diagonal Gram entries; `None` for one particle.
    pub fn mean_offdiag(&self) -> Option<f64> {
        let n = self.len();
        if n < 2 {
            return None;
        }
        let mut s = 0.0;
        for (j, row) in self.gram.iter().enumerate() {
            for (i, k) in row.iter().enumerate() {
                if i != j {
                    s += k;
                }
            }
        }
        Some(s / (n * (n - 1)) as f64)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(-|a - b|^2 / h)` and its gradient with respect to `a`.
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> Result<(f64, Vec<f64>)> {
    check_len("kernel argument", a.len(), b.len())?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("kernel bandwidth must be positive, got {h}")));
    }
    let k = (-sq_dist(a, b) / h).exp();
    let c = -2.0 / h * k;
    Ok((k, a.iter().zip(b).map(|(x, y)| c * (x - y)).collect()))
}

/// `med^2 / ln(n + 1)` where `med` is the median pairwise Euclidean
/// distance. For an even number of pairs the lower-middle element is taken.
/// A single particle gets bandwidth 1, and so does a set of identical
/// particles (with a warning).
pub fn median_bandwidth<P: AsRef<[f64]>>(particles: &[P]) -> Result<f64> {
    let n = particles.len();
    if n == 0 {
        return Err(Error::Empty("particles"));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let d = particles[0].as_ref().len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        check_len("particle length", d, particles[j].as_ref().len())?;
        for i in (j + 1)..n {
            dists.push(sq_dist(particles[j].as_ref(), particles[i].as_ref()).sqrt());
        }
    }
    if dists.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pairwise particle distance".into()));
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[(dists.len() - 1) / 2];
    if med == 0.0 {
        log::warn!("all {n} particles coincide; falling back to kernel bandwidth 1");
        return Ok(1.0);
    }
    Ok(med * med / ((n + 1) as f64).ln())
}

/// Stein directions with per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SteinDirection {
    pub directions: Vec<Vec<f64>>,
    /// Kernel-weighted utility part of each direction.
    pub driver_norms: Vec<f64>,
    /// Kernel-gradient part of each direction.
    pub repulsion_norms: Vec<f64>,
}

impl SteinDirection {
    /// Mean over particles of `|repulsion| / |driver|`. Infinite if some
    /// driver vanishes while its repulsion does not; `None` when undefined.
    pub fn repulsion_ratio(&self) -> Option<f64> {
        let mut s = 0.0;
        for (r, d) in self.repulsion_norms.iter().zip(&self.driver_norms) {
            if *d == 0.0 {
                if *r == 0.0 {
                    return None;
                }
                return Some(f64::INFINITY);
            }
            s += r / d;
        }
        Some(s / self.driver_norms.len() as f64)
    }
}

/// Stein direction under a precomputed kernel. `prior_grads` is `None` for
/// a flat prior.
pub fn svpg_direction_with_kernel(
    kernel: &KernelEval,
    utility_grads: &[Vec<f64>],
    prior_grads: Option<&[Vec<f64>]>,
    alpha: f64,
) -> Result<SteinDirection> {
    let n = kernel.len();
    if n == 0 {
        return Err(Error::Empty("particles"));
    }
    check_len("utility gradients", n, utility_grads.len())?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {alpha}")));
    }
    let d = utility_grads[0].len();
    let mut scores = Vec::with_capacity(n);
    for (j, g) in utility_grads.iter().enumerate() {
        check_len("utility gradient length", d, g.len())
            .map_err(|e| e.in_particle(j))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utility gradient".into()).in_particle(j));
        }
        let mut s: Vec<f64> = g.iter().map(|v| v / alpha).collect();
        if let Some(prior) = prior_grads {
            check_len("prior gradients", n, prior.len())?;
            check_len("prior gradient length", d, prior[j].len())
                .map_err(|e| e.in_particle(j))?;
            for (si, pi) in s.iter_mut().zip(&prior[j]) {
                *si += pi;
            }
        }
        scores.push(s);
    }
    let count = n as f64;
    let mut directions = Vec::with_capacity(n);
    let mut driver_norms = Vec::with_capacity(n);
    let mut repulsion_norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut driver = vec![0.0; d];
        let mut repulsion = vec![0.0; d];
        for j in 0..n {
            let k = kernel.gram[j][i];
            for (acc, s) in driver.iter_mut().zip(&scores[j]) {
                *acc += s * k;
            }
            for (acc, g) in repulsion.iter_mut().zip(&kernel.grads[j][i]) {
                *acc += g;
            }
        }
        for v in driver.iter_mut().chain(repulsion.iter_mut()) {
            *v /= count;
        }
        driver_norms.push(norm(&driver));
        repulsion_norms.push(norm(&repulsion));
        let dir: Vec<f64> = driver.iter().zip(&repulsion).map(|(a, b)| a + b).collect();
        if dir.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Stein direction".into()).in_particle(i));
        }
        directions.push(dir);
    }
    Ok(SteinDirection {
        directions,
        driver_norms,
        repulsion_norms,
    })
}

/// Stein direction with an RBF kernel of bandwidth `h`.
pub fn svpg_direction<P: AsRef<[f64]>>(
    particles: &[P],
    utility_grads: &[Vec<f64>],
    prior_grads: Option<&[Vec<f64>]>,
    alpha: f64,
    h: f64,
) -> Result<SteinDirection> {
    let kernel = KernelEval::rbf(particles, h)?;
    svpg_direction_with_kernel(&kernel, utility_grads, prior_grads, alpha)
}

/// Linear temperature schedule, constant after `iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub initial: f64,
    pub final_alpha: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// Constant log-density; contributes nothing to the direction.
    #[default]
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvpgConfig {
    pub alpha: f64,
    pub prior: Prior,
    pub anneal: Option<AnnealSchedule>,
    /// Rescale each utility gradient to at most this norm before the
    /// Stein direction is formed.
    pub max_grad_norm: Option<f64>,
}

impl Default for SvpgConfig {
    fn default() -> Self {
        SvpgConfig {
            alpha: 10.0,
            prior: Prior::Flat,
            anneal: None,
            max_grad_norm: None,
        }
    }
}

impl SvpgConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.alpha) {
            return Err(Error::Config(format!("temperature must be positive, got alpha = {}", self.alpha)));
        }
        if let Some(s) = self.anneal {
            if !positive(s.initial) || !positive(s.final_alpha) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got anneal endpoints {} and {}",
                    s.initial, s.final_alpha
                )));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !positive(c) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Temperature at `iteration`.
pub fn anneal_alpha(config: &SvpgConfig, iteration: usize) -> f64 {
    match config.anneal {
        None => config.alpha,
        Some(s) if iteration >= s.iterations || s.iterations == 0 => s.final_alpha,
        Some(s) => {
            let t = iteration as f64 / s.iterations as f64;
            s.initial + (s.final_alpha - s.initial) * t
        }
    }
}

/// Scales `v` down to norm `max` if it is longer.
pub fn clip_norm(v: &mut [f64], max: f64) {
    let n = norm(v);
    if n > max {
        let s = max / n;
        for x in v {
            *x *= s;
        }
    }
}
