//! Momentum SGD over a [`ParamStore`].

use std::collections::HashMap;

use super::graph::Arr;
use super::params::ParamStore;

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay
/// (decay is added to the gradient before the momentum update).
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Arr>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { learning_rate, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Apply one update from named gradients. Frozen parameters are skipped
    /// entirely: no velocity is accumulated and their values never change.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Arr)]) {
        for (name, grad) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let value = store.get_mut(name).expect("gradient for unknown parameter");
            let mut update = grad.clone();
            if self.weight_decay != 0.0 {
                update.zip_mut_with(value, |g, &w| *g += self.weight_decay * w);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(value.raw_dim()));
            v.zip_mut_with(&update, |v, &g| *v = self.momentum * *v + g);
            value.zip_mut_with(v, |w, &v| *w -= self.learning_rate * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn plain_sgd_step() {
        let mut store = ParamStore::new();
        store.insert("w", arr1(&[1.0, 2.0]).into_dyn());
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0);
        opt.step(&mut store, &[("w".into(), arr1(&[1.0, -1.0]).into_dyn())]);
        let w = store.get("w").unwrap();
        assert_eq!(w[[0]], 0.9);
        assert_eq!(w[[1]], 2.1);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", arr1(&[0.0]).into_dyn());
        let mut opt = SgdMomentum::new(1.0, 0.5, 0.0);
        let g = vec![("w".to_string(), arr1(&[1.0]).into_dyn())];
        opt.step(&mut store, &g); // v=1, w=-1
        opt.step(&mut store, &g); // v=1.5, w=-2.5
        assert_eq!(store.get("w").unwrap()[[0]], -2.5);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", arr1(&[0.123456789]).into_dyn());
        store.set_frozen("w", true).unwrap();
        let before = store.get("w").unwrap().clone();
        let mut opt = SgdMomentum::new(0.1, 0.9, 1e-4);
        for _ in 0..10 {
            opt.step(&mut store, &[("w".into(), arr1(&[5.0]).into_dyn())]);
        }
        let after = store.get("w").unwrap();
        assert_eq!(before.as_slice().unwrap(), after.as_slice().unwrap());
    }
}
