use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(format!(
                    "adam slot {i}: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = beta1 * md[j] + (1.0 - beta1) * gj;
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form: returns updated copies of `params` and `state`.
pub fn adam_step(params: &[Tensor], grads: &[Tensor], state: &AdamState) -> Result<(Vec<Tensor>, AdamState)> {
    let mut next = params.to_vec();
    let mut st = state.clone();
    {
        let mut refs: Vec<&mut Tensor> = next.iter_mut().collect();
        let grefs: Vec<&Tensor> = grads.iter().collect();
        st.step(&mut refs, &grefs)?;
    }
    Ok((next, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> AdamState {
        AdamState::new(AdamConfig::with_lr(lr), &[&Tensor::scalar(0.0)])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = vec![Tensor::from_vec(vec![1.5, -2.0, 0.25])];
        let st = AdamState::new(AdamConfig::default(), &[&p[0]]);
        let (next, st) = adam_step(&p, &[Tensor::zeros(&[3])], &st).unwrap();
        assert_eq!(next, p);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (next, _) = adam_step(&[Tensor::scalar(1.0)], &[Tensor::scalar(1.0)], &scalar_state(0.1)).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((next[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn second_step_hand_recursion() {
        // m1 = 0.1, v1 = 0.001; m2 = 0.19, v2 = 0.001999
        // m_hat = 0.19 / 0.19 = 1, v_hat = 0.001999 / 0.001999 = 1
        let st = scalar_state(0.1);
        let (p1, st) = adam_step(&[Tensor::scalar(1.0)], &[Tensor::scalar(1.0)], &st).unwrap();
        let (p2, st) = adam_step(&p1, &[Tensor::scalar(1.0)], &st).unwrap();
        let step2 = p1[0].data()[0] - p2[0].data()[0];
        assert!((step2 - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
        assert!((st.first_moments()[0].data()[0] - 0.19).abs() < 1e-15);
        assert!((st.second_moments()[0].data()[0] - 0.001999).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let st = scalar_state(0.1);
        assert!(adam_step(&[Tensor::scalar(1.0)], &[Tensor::zeros(&[2])], &st).is_err());
    }
}
