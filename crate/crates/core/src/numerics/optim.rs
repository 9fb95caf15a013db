use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(like: &Tensor, config: AdamConfig) -> Self {
        let mut zeros = like.clone();
        zeros.fill(0.0);
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `param` in place. `grad` is left as is.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.len(), grad.len());
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

/// Applies one optimizer step to every trainable tensor of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    states: Vec<Option<AdamState>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let states = store
            .ids()
            .map(|id| match kind {
                OptimizerKind::Adam(cfg) if store.is_trainable(id) => {
                    Some(AdamState::new(store.value(id), cfg))
                }
                _ => None,
            })
            .collect();
        Self { kind, states }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let grad = grads.get(id);
            match self.kind {
                OptimizerKind::Adam(_) => {
                    let state = self.states[id.index()]
                        .as_mut()
                        .expect("adam state for trainable parameter");
                    state.step(store.value_mut(id), grad);
                }
                OptimizerKind::Sgd { lr } => {
                    for (p, g) in store.value_mut(id).data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::row_vector(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Tensor::zeros(1, 3);
        for _ in 0..5 {
            st.step(&mut p, &g);
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_is_a_sign_step_of_size_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // -lr * g / (|g| + eps).
        let mut p = Tensor::row_vector(vec![1.0]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &Tensor::row_vector(vec![0.5]));
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn quadratic_decreases_monotonically_after_second_step() {
        let f = |t: f64| (t - 3.0) * (t - 3.0);
        let mut p = Tensor::row_vector(vec![0.0]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut values = vec![f(0.0)];
        for _ in 0..10 {
            let g = Tensor::row_vector(vec![2.0 * (p.data()[0] - 3.0)]);
            st.step(&mut p, &g);
            values.push(f(p.data()[0]));
        }
        for w in values[2..].windows(2) {
            assert!(w[1] < w[0], "{values:?}");
        }
    }

    #[test]
    fn sgd_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, 2.0]));
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(&[1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1 }, &store);
        opt.step(&mut store, &grads);
        assert_eq!(store.value(id).data(), &[0.9, 2.1]);
    }
}
