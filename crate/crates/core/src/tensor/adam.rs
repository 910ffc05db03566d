use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            config,
            first_moment: sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. `grads[i]` belongs to `params[i]`;
    /// the gradients are consumed.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: Vec<Option<Tensor<T>>>, lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "state tracks {} parameters, got {} parameters and {} gradients",
                    self.first_moment.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or(TensorError::MissingGrad(i)))
            .collect::<Result<Vec<_>>>()?;
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first_moment[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }

        self.step_count += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (lr_t, eps) = (T::from_f64(lr / bc1), T::from_f64(epsilon));
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::ONE - b1) * gi;
                *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                *w -= lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
