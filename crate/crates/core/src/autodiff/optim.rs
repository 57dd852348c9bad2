use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore};

/// Stochastic gradient descent with optional heavy-ball momentum.
/// Only trainable parameters are updated.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for id in store.ids().collect::<Vec<_>>() {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id).tensor.data_mut();
            if self.momentum == 0.0 {
                p.iter_mut().zip(g.data()).for_each(|(w, d)| *w -= self.lr * d);
            } else {
                let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; p.len()]);
                for ((w, vel), d) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = self.momentum * *vel + d;
                    *w -= self.lr * *vel;
                }
            }
        }
    }
}
