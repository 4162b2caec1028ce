use std::collections::BTreeMap;

use crate::graph::ModelGraph;
use crate::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-tensor optimizer state, keyed by `layer.weight` / `layer.bias`.
#[derive(Debug)]
pub struct OptimizerState {
    optimizer: Optimizer,
    learning_rate: f64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, learning_rate: f64) -> Self {
        OptimizerState {
            optimizer,
            learning_rate,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Update one tensor. Call [`OptimizerState::begin_step`] once per batch first.
    pub fn update(&mut self, key: &str, params: &mut [f32], grads: &[f32]) {
        let slot = self.slots.entry(key.to_string()).or_default();
        if slot.first.is_empty() {
            slot.first = vec![0.0; params.len()];
            slot.second = vec![0.0; params.len()];
        }
        let lr = self.learning_rate;
        match self.optimizer {
            Optimizer::Sgd { momentum } => {
                for ((w, &g), v) in params.iter_mut().zip(grads).zip(&mut slot.first) {
                    *v = momentum * *v + g as f64;
                    *w = (*w as f64 - lr * *v) as f32;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut slot.first).zip(&mut slot.second) {
                    let g = g as f64;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w = (*w as f64 - lr * (*m / c1) / ((*v / c2).sqrt() + epsilon)) as f32;
                }
            }
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply `grads` to every non-frozen layer of `g`.
    pub fn apply(&mut self, g: &mut ModelGraph, grads: &Gradients<f32>) {
        self.begin_step();
        for (name, pg) in grads {
            let Some(layer) = g.layers.get_mut(name) else { continue };
            if layer.frozen {
                continue;
            }
            self.update(&format!("{name}.weight"), &mut layer.weight.data, &pg.weight);
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), pg.bias.as_ref()) {
                self.update(&format!("{name}.bias"), &mut b.data, gb);
            }
        }
    }
}
