//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    /// Zero moments with `beta1 = 0.9`, `beta2 = 0.999`, `eps_hat = 1e-8`.
    pub fn new(len: usize, step_size: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    /// Applies one update in place. `ascent` adds the step (maximizing a
    /// utility); otherwise the step is subtracted (minimizing a loss).
    ///
    /// Non-finite gradients are rejected before any state is touched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], ascent: bool) -> Result<()> {
        check_len("adam parameters", self.first_moment.len(), params.len())?;
        check_len("adam gradient", self.first_moment.len(), grad.len())?;
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {k} passed to adam")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let sign = if ascent { 1.0 } else { -1.0 };
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += sign * self.step_size * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference recurrence, written out step by step.
    fn scalar_adam(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        let mut xs = vec![];
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x += lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            xs.push(x);
        }
        xs
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3], true).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [0.5, -3.0, 1e-3] {
            let mut st = AdamState::new(1, 0.01);
            let mut p = vec![0.0];
            st.step(&mut p, &[g], true).unwrap();
            let expect = 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let mut st = AdamState::new(1, 0.01);
        let mut p = vec![0.0];
        st.step(&mut p, &[0.7], true).unwrap();
        st.step(&mut p, &[0.7], true).unwrap();
        let r = scalar_adam(&[0.7, 0.7], 0.01);
        assert!((p[0] - r[1]).abs() < 1e-15);
        // Identical gradients: the bias-corrected ratio stays 1, so each
        // step has the same magnitude.
        assert!((r[1] - 2.0 * r[0]).abs() < 1e-10);
    }

    #[test]
    fn descent_negates() {
        let mut a = AdamState::new(2, 0.1);
        let mut b = a.clone();
        let (mut pa, mut pb) = (vec![0.0, 0.0], vec![0.0, 0.0]);
        a.step(&mut pa, &[1.0, -2.0], true).unwrap();
        b.step(&mut pb, &[1.0, -2.0], false).unwrap();
        assert_eq!(pa[0], -pb[0]);
        assert_eq!(pa[1], -pb[1]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        assert!(st.step(&mut p, &[1.0, f64::NAN], true).is_err());
        assert_eq!(st.step_count, 0);
        assert!(st.step(&mut p, &[1.0], true).is_err());
    }
}
