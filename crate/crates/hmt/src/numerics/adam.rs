//! Adam optimizer with bias correction and a global-norm gradient clip.

use crate::error::{HmtError, Result};
use crate::numerics::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState {
    step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        let moments = params
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        AdamState { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restore from checkpointed moment tensors (`<name>.m1` / `<name>.m2`).
    pub fn from_parts(
        params: &[(String, Tensor)],
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<AdamState> {
        let mut moments = Vec::with_capacity(params.len());
        for (name, t) in params {
            let m1 = lookup(&format!("{name}.m1")).unwrap_or_else(|| vec![0.0; t.numel()]);
            let m2 = lookup(&format!("{name}.m2")).unwrap_or_else(|| vec![0.0; t.numel()]);
            if m1.len() != t.numel() || m2.len() != t.numel() {
                return Err(HmtError::Config(format!(
                    "optimizer moments for {name} have wrong length"
                )));
            }
            moments.push((name.clone(), m1, m2));
        }
        Ok(AdamState { step, moments })
    }

    pub fn moments(&self) -> &[(String, Vec<f64>, Vec<f64>)] {
        &self.moments
    }

    /// One Adam update over `params`; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(HmtError::Contract(format!(
                "adam_step over {} params but state holds {}",
                params.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for ((name, param), (mname, m1, m2)) in params.iter().zip(self.moments.iter_mut()) {
            debug_assert_eq!(name, mname);
            let grad = param.grad().ok_or_else(|| {
                HmtError::Contract(format!("adam_step: parameter {name} has no gradient"))
            })?;
            let mut data = param.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g;
                m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            drop(data);
            param.zero_grad();
        }
        Ok(())
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`
/// (`max_norm <= 0` disables clipping). Returns the pre-clip norm.
pub fn clip_global_norm(params: &[(String, Tensor)], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, p) in params {
        let g = p.grad().ok_or_else(|| {
            HmtError::Contract(format!("clip_global_norm: parameter {name} has no gradient"))
        })?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params {
            // grad buffers exist; checked above
            let inner = p.grad().unwrap();
            p.zero_grad();
            let mut g = inner;
            g.iter_mut().for_each(|v| *v *= scale);
            p.set_grad(&g);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("p".to_string(), t)]
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        p.set_grad(&[0.3, -0.7, 4.0]);
        let params = named(p.clone());
        let mut adam = AdamState::new(&params);
        adam.adam_step(&params, 0.01).unwrap();
        let d = p.to_vec();
        // First-step Adam update is ~ -lr * sign(g).
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-4, "{d:?}");
        assert!((d[1] - (-2.0 + 0.01)).abs() < 1e-4, "{d:?}");
        assert!((d[2] - (0.5 - 0.01)).abs() < 1e-4, "{d:?}");
        // Gradients cleared after the step.
        assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let params = named(p.clone());
        let mut adam = AdamState::new(&params);
        for _ in 0..5 {
            adam.adam_step(&params, 0.1).unwrap();
        }
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let p = Tensor::leaf(&[2], vec![0.0, 0.0], false).unwrap();
        let params = vec![("w_q".to_string(), p)];
        let mut adam = AdamState::new(&params);
        let err = adam.adam_step(&params, 0.1).unwrap_err();
        assert!(err.to_string().contains("w_q"), "{err}");
    }

    #[test]
    fn identical_seeds_give_bit_identical_parameters_after_ten_steps() {
        let run = || {
            let mut rng = RngState::new(11);
            let p = Tensor::randn(&[8], 0.02, &mut rng, true);
            let params = named(p.clone());
            let mut adam = AdamState::new(&params);
            for step in 0..10 {
                // Synthetic deterministic gradient.
                let g: Vec<f64> = p
                    .to_vec()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * 0.5 + (i as f64) * 0.01 + step as f64 * 1e-3)
                    .collect();
                p.set_grad(&g);
                adam.adam_step(&params, 0.01).unwrap();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clip_rescales_large_gradients_only() {
        let p = Tensor::leaf(&[2], vec![0.0, 0.0], true).unwrap();
        p.set_grad(&[3.0, 4.0]);
        let params = named(p.clone());
        let norm = clip_global_norm(&params, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        let clipped: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        p.set_grad(&[0.1, 0.2]);
        let small = clip_global_norm(&params, 1.0).unwrap();
        assert!(small < 1.0);
        assert_eq!(p.grad().unwrap(), vec![0.1, 0.2]);
    }
}
