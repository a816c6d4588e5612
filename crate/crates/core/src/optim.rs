//! Adam optimizer.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

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

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u32,
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so parameters without a gradient (frozen) are left alone.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.params().len() {
            return Err(Error::Invalid("one gradient slot per parameter required".into()));
        }
        if !(lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.state.resize_with(grads.len(), || None);
        let (b1, b2) = (T::from_f64(self.config.beta1), T::from_f64(self.config.beta2));
        let eps = T::from_f64(self.config.eps);
        for ((param, grad), slot) in store.params_mut().iter_mut().zip(grads).zip(&mut self.state) {
            let Some(g) = grad else { continue };
            if g.shape() != param.value.shape() {
                return Err(Error::Invalid(alloc::format!("gradient shape mismatch for {}", param.name)));
            }
            let st = slot.get_or_insert_with(|| Moments {
                m: alloc::vec![T::zero(); g.len()],
                v: alloc::vec![T::zero(); g.len()],
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - libm::pow(self.config.beta1, st.steps as f64);
            let c2 = 1.0 - libm::pow(self.config.beta2, st.steps as f64);
            let step = T::from_f64(lr / c1);
            let c2 = T::from_f64(c2);
            for (((p, &gi), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        init.constant("p".into(), &[values.len()], 0.0);
        store.params_mut()[0].value = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut store = store_with(&[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        let g = Tensor::new(&[3], alloc::vec![0.3, -4.0, 0.0]).unwrap();
        opt.step(&mut store, &[Some(g)], 0.1).unwrap();
        let p = store.params()[0].value.data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut store = store_with(&[0.7]);
        let mut opt = Adam::new(AdamConfig::default());
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * store.params()[0].value.data()[0];
            opt.step(&mut store, &[Some(Tensor::new(&[1], alloc::vec![g]).unwrap())], 0.05).unwrap();
            m = 0.9 * m + 0.1 * (2.0 * x);
            v = 0.999 * v + 0.001 * (2.0 * x) * (2.0 * x);
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((store.params()[0].value.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut store = store_with(&[1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &[None], 0.1).unwrap();
        assert_eq!(store.params()[0].value.data(), [1.0]);
        assert!(opt.step(&mut store, &[], 0.1).is_err());
    }
}
