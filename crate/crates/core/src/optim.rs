//! Adam with checkpointable state.

use std::collections::BTreeMap;

use lcnerf_autograd::Element;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("gradient", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
            });
            if self.lr == 0.0 {
                continue;
            }
            let p = store.get_mut(name).expect("checked above");
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p - step_size * m / ((v * inv_bc2).sqrt() + eps);
            });
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`m.{name}`, `v.{name}`).
    pub fn state(&self) -> impl Iterator<Item = (String, &ArrayD<T>)> {
        self.m
            .iter()
            .map(|(k, a)| (format!("m.{k}"), a))
            .chain(self.v.iter().map(|(k, a)| (format!("v.{k}"), a)))
    }

    /// Restore a moment buffer written by [`Adam::state`].
    pub fn load_state(&mut self, key: &str, value: ArrayD<T>) -> Result<()> {
        if let Some(name) = key.strip_prefix("m.") {
            self.m.insert(name.to_string(), value);
        } else if let Some(name) = key.strip_prefix("v.") {
            self.v.insert(name.to_string(), value);
        } else {
            return Err(Error::Checkpoint(format!("unknown optimizer entry `{key}`")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", arr1(&[1.0, -2.0]).into_dyn());
        let mut grads = Grads::new();
        grads.insert("w".to_string(), arr1(&[0.5, -3.0]).into_dyn());
        let mut opt = Adam::new(0.1, 0.0, 0.9, 1e-8);
        opt.update(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[3]), 0.123f32));
        let before = store.clone();
        let mut grads = Grads::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[3]), 7.0f32));
        let mut opt = Adam::new(0.0, 0.0, 0.9, 1e-8);
        opt.update(&mut store, &grads).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn state_round_trips() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        let mut grads = Grads::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[2]), 0.5f32));
        let mut opt = Adam::new(1e-3, 0.0, 0.9, 1e-8);
        opt.update(&mut store, &grads).unwrap();
        let mut copy = Adam::new(1e-3, 0.0, 0.9, 1e-8);
        copy.step = opt.step;
        for (k, v) in opt.state() {
            copy.load_state(&k, v.clone()).unwrap();
        }
        assert_eq!(copy, opt);
        assert!(copy.load_state("x.a", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }

    #[test]
    fn unknown_gradient_rejected_before_any_update() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", ArrayD::zeros(IxDyn(&[1])));
        let mut grads = Grads::new();
        grads.insert("b".to_string(), ArrayD::zeros(IxDyn(&[1])));
        let mut opt = Adam::new(1e-3, 0.0, 0.9, 1e-8);
        assert!(opt.update(&mut store, &grads).is_err());
        assert_eq!(opt.step, 0);
    }
}
