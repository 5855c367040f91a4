//! AdamW with decoupled weight decay.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Optimizer state: first/second moments mirroring the parameter shapes and a
/// step counter. Decay is decoupled — `θ ← θ − lr·wd·θ` happens outside the
/// moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    /// State for a fixed parameter list; `sizes` must match the order in which
    /// parameters are later passed to [`AdamW::step`].
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the whole parameter group. Every parameter must come
    /// with its gradient; a missing gradient is an error naming the parameter.
    pub fn step(
        &mut self,
        params: &mut [(&'static str, &mut Tensor)],
        grads: &[Option<&[f64]>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, tensor), grad) in params.iter().zip(grads) {
            match grad {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "missing gradient for parameter {name}"
                    )))
                }
                Some(grad) if grad.len() != tensor.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "gradient length {} does not match parameter {name} of length {}",
                        grad.len(),
                        tensor.len()
                    )))
                }
                _ => {}
            }
        }

        self.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for (pi, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = grads[pi].expect("checked above");
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for (i, value) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                *value *= 1.0 - c.lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *value -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut theta = scalar_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.1), &[1]);
        let grads: Vec<Option<&[f64]>> = vec![Some(&[0.0])];
        opt.step(&mut [("theta", &mut theta)], &grads).unwrap();
        assert!((theta.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computed_oracle() {
        // θ=0, g=1, lr=1e-3, wd=0: oracle computed with explicit scalar ops.
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (1e-3, 0.9, 0.999, 1e-8);
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expect = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut theta = scalar_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::new(lr, 0.0), &[1]);
        let g = [1.0];
        let grads: Vec<Option<&[f64]>> = vec![Some(&g)];
        opt.step(&mut [("theta", &mut theta)], &grads).unwrap();
        assert!(
            (theta.data()[0] - expect).abs() < 1e-12,
            "{} vs oracle {expect}",
            theta.data()[0]
        );
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut theta = scalar_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0), &[1]);
        let grads: Vec<Option<&[f64]>> = vec![None];
        let err = opt.step(&mut [("encoder.fc.weight", &mut theta)], &grads).unwrap_err();
        assert!(err.to_string().contains("encoder.fc.weight"), "{err}");
    }

    #[test]
    fn trajectories_are_bit_identical_across_runs() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.5, -0.25, 1.0]).unwrap();
            let mut opt = AdamW::new(AdamWConfig::new(1e-2, 1e-4), &[3]);
            for step in 0..25 {
                let g: Vec<f64> = (0..3).map(|i| ((step * 3 + i) as f64 * 0.37).sin()).collect();
                let grads: Vec<Option<&[f64]>> = vec![Some(&g)];
                opt.step(&mut [("p", &mut p)], &grads).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
