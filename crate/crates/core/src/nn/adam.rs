use ndarray::Zip;

use super::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Grads,
    v: Grads,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            Zip::from(params.get_mut(id))
                .and(self.m.get_mut(id))
                .and(self.v.get_mut(id))
                .and(grads.get(id))
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= learning_rate * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]]);
        let mut grads = store.zeros_like();
        grads.get_mut(id).assign(&array![[0.5, -3.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, &grads);
        let w = store.get(id);
        assert!((w[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[[0, 1]] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[3.0, -4.0]]);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        );
        let mut grads = store.zeros_like();
        for _ in 0..2000 {
            let w = store.get(id).clone();
            grads.get_mut(id).assign(&(&w * 2.0));
            adam.update(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }
}
