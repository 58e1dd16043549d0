use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and are positionally bound to the parameter list.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid("adam: parameter set changed between steps"));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut adam = Adam::<f64>::new(cfg(0.1));
        let mut w = Tensor::vector(vec![2.0]);
        adam.step(vec![&mut w], &[Tensor::vector(vec![1.0])]).unwrap();
        let before = w.clone();
        let (m0, v0) = (adam.moments().0[0][0], adam.moments().1[0][0]);
        adam.step(vec![&mut w], &[Tensor::vector(vec![0.0])]).unwrap();
        // the bias-corrected first moment still pushes the parameter
        assert!(w.data()[0] < before.data()[0]);
        assert!((adam.moments().0[0][0] - 0.9 * m0).abs() < 1e-15);
        assert!((adam.moments().1[0][0] - 0.999 * v0).abs() < 1e-15);

        let mut fresh = Adam::<f64>::new(cfg(0.1));
        let mut u = Tensor::vector(vec![2.0]);
        fresh.step(vec![&mut u], &[Tensor::vector(vec![0.0])]).unwrap();
        assert_eq!(u.data(), &[2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g|+eps) ≈ lr.
        let mut adam = Adam::<f64>::new(cfg(0.1));
        let mut w = Tensor::vector(vec![0.0]);
        adam.step(vec![&mut w], &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = Adam::<f64>::new(cfg(0.1));
        let mut w = Tensor::vector(vec![0.0]);
        for _ in 0..100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            adam.step(vec![&mut w], &[Tensor::vector(vec![g])]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![0.0, 1.0]);
        assert!(adam.step(vec![&mut w], &[Tensor::vector(vec![1.0])]).is_err());
    }
}
