//! Optimizers over named parameters.

use std::collections::BTreeMap;

/// Heavy-ball momentum with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, value: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        let momentum = self.momentum;
        match self.velocity.get_mut(name) {
            Some(buf) => {
                for ((w, g), b) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
                    *b = momentum * *b + g + weight_decay * *w;
                    *w -= lr * *b;
                }
            }
            None => {
                let mut buf = Vec::with_capacity(value.len());
                for (w, g) in value.iter_mut().zip(grad) {
                    let b = g + weight_decay * *w;
                    *w -= lr * b;
                    buf.push(b);
                }
                self.velocity.insert(name.to_owned(), buf);
            }
        }
    }
}

/// Bias-corrected adaptive moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (u64, Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, name: &str, value: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (t, m, v) = self
            .state
            .entry(name.to_owned())
            .or_insert_with(|| (0, vec![0.0; value.len()], vec![0.0; value.len()]));
        *t += 1;
        let c1 = 1.0 - b1.powi(*t as i32);
        let c2 = 1.0 - b2.powi(*t as i32);
        for i in 0..value.len() {
            let g = grad[i] + weight_decay * value[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}
