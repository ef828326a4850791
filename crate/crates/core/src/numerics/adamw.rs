//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must be in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter set, laid out as a list of flat slots.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params<P: ParamSet + ?Sized>(config: AdamWConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over every slot. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} param slots / {} grad slots, state has {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("slot {i}: param {} grad {} state {}", p.len(), g.len(), self.m[i].len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("adamw gradient"));
            }
        }

        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if weight_decay != 0.0 {
                    p[j] -= lr * weight_decay * p[j];
                }
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Convenience wrapper for structured parameter sets.
    pub fn step_params<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.slices();
        let mut p = params.slices_mut();
        self.step(&mut p, &g)
    }
}

/// A set of learnable tensors exposed as flat slots in a fixed order.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "assign_flat",
                format!("{} values for {} params", flat.len(), self.num_params()),
            ));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &[3]);
        let mut p = vec![1.0, -2.0, 0.25];
        let orig = p.clone();
        for _ in 0..5 {
            st.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &[4]);
        let mut p = vec![0.0; 4];
        let g = [3.0, -0.001, 1e3, -7.0];
        st.step(&mut [&mut p[..]], &[&g]).unwrap();
        for (x, gi) in p.iter().zip(g) {
            // |m̂| / (√v̂ + eps) = |g| / (|g| + eps)
            let want = -0.05 * gi.signum();
            let slack = 0.05 * 1e-8 / gi.abs() + 1e-15;
            assert!((x - want).abs() <= slack, "{x} vs {want}");
        }
    }

    #[test]
    fn one_step_hand_executed() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1, p = 1 - 0.1 / (1 + 1e-8)
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &[1]);
        let mut p = vec![1.0];
        st.step(&mut [&mut p[..]], &[&[1.0]]).unwrap();
        assert!((p[0] - 0.900_000_001).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_params_with_zero_grad() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &[1]);
        let mut p = vec![2.0];
        st.step(&mut [&mut p[..]], &[&[0.0]]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[2]);
        let mut p = vec![0.0; 2];
        assert!(st.step(&mut [&mut p[..]], &[&[1.0]]).is_err());
        assert!(st.step(&mut [&mut p[..]], &[&[1.0, f64::INFINITY]]).is_err());
        assert_eq!(st.step_count(), 0);
        assert_eq!(p, vec![0.0; 2]);
    }
}
