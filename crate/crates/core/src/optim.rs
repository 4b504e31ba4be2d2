//! Adam / AdamW and global-norm gradient clipping over flat parameter buffers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay (`p -= lr·wd·p` before the
/// bias-corrected Adam step). `weight_decay = 0` is plain Adam.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) || !params.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("adamw inputs".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p -= lr * weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Global L2 norm of a gradient buffer.
pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive, got {clip_norm}"
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let norm = grad_norm(grads);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_minus_lr() {
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, 0.01, 0.0, AdamConfig::default()).unwrap();
        assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_adam_oracle() {
        let cfg = AdamConfig::default();
        let (lr, mut p) = (0.05, [1.3]);
        let mut st = AdamState::new(1);
        let (mut op, mut m, mut v) = (1.3f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * p[0] - 0.4;
            adamw_step(&mut p, &[g], &mut st, lr, 0.0, cfg).unwrap();
            let og = 2.0 * op - 0.4;
            m = 0.9 * m + 0.1 * og;
            v = 0.999 * v + 0.001 * og * og;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            op -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - op).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = [0.25, -3.0];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(p, [0.25, -3.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = [2.0];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, 0.1, 0.5, AdamConfig::default()).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn clipping_cases() {
        let mut small = [0.3, 0.4];
        assert_eq!(clip_gradients(&mut small, 1.0).unwrap(), 0.5);
        assert_eq!(small, [0.3, 0.4]);

        let mut big = [1.2, 1.6];
        clip_gradients(&mut big, 1.0).unwrap();
        assert!((grad_norm(&big) - 1.0).abs() < 1e-9);
        assert!((big[0] - 0.6).abs() < 1e-12);

        let mut zero = [0.0; 3];
        assert_eq!(clip_gradients(&mut zero, 1.0).unwrap(), 0.0);
        assert_eq!(zero, [0.0; 3]);

        assert!(clip_gradients(&mut [f64::NAN], 1.0).is_err());
    }
}
