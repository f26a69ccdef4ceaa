use crate::{GradError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

/// Adam optimizer state for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                (
                    Tensor::zeros(p.shape().to_vec()),
                    Tensor::zeros(p.shape().to_vec()),
                )
            })
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Rebuild a state from serialized parts.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(GradError::InvalidArgument {
                op: "adam",
                reason: format!("{} first moments vs {} second moments", m.len(), v.len()),
            });
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "adam",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected Adam update. Gradients are validated before any
    /// state changes: a non-finite gradient leaves parameters and moments
    /// untouched. `lr = 0` advances the moments but leaves parameters as is.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(GradError::InvalidArgument {
                op: "adam",
                reason: format!("learning rate {lr}"),
            });
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(GradError::InvalidArgument {
                op: "adam",
                reason: format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(GradError::NonFiniteGradient(i));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *pi -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam() -> (Adam, Vec<Tensor>) {
        let params = vec![Tensor::scalar(0.0)];
        (Adam::new(AdamConfig::default(), &params), params)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let before = params.clone();
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros([3])], 1e-2).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_is_minus_lr_times_sign() {
        let (mut adam, mut params) = scalar_adam();
        adam.step(&mut params, &[Tensor::scalar(1.0)], 1e-3)
            .unwrap();
        let p = params[0].data()[0];
        assert!((p + 1e-3).abs() < 1e-9, "{p}");
    }

    #[test]
    fn repeated_gradient_does_not_grow_the_step() {
        let (mut adam, mut params) = scalar_adam();
        adam.step(&mut params, &[Tensor::scalar(0.7)], 1e-3)
            .unwrap();
        let first = params[0].data()[0];
        adam.step(&mut params, &[Tensor::scalar(0.7)], 1e-3)
            .unwrap();
        let second = params[0].data()[0] - first;
        assert!(second.abs() <= first.abs() * 1.01);
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let (mut adam, mut params) = scalar_adam();
        let before = (adam.clone(), params.clone());
        let err = adam
            .step(&mut params, &[Tensor::scalar(f32::NAN)], 1e-3)
            .unwrap_err();
        assert_eq!(err, GradError::NonFiniteGradient(0));
        assert_eq!((adam, params), before);
    }

    #[test]
    fn rejects_negative_learning_rate() {
        let (mut adam, mut params) = scalar_adam();
        assert!(adam
            .step(&mut params, &[Tensor::scalar(1.0)], -1.0)
            .is_err());
    }
}
