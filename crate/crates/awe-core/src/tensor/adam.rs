//! Bias-corrected ADAM updates over a [`ParamStore`].

use super::store::{ParamId, ParamStore};
use super::tensor::{Real, TensorError, TensorResult};

#[derive(Debug, Clone, Copy)]
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

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    moments: Vec<Option<(Vec<F>, Vec<F>)>>,
    step: u64,
}

impl<F: Real> Default for AdamState<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        Self {
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn slot(&mut self, id: ParamId, numel: usize) -> &mut (Vec<F>, Vec<F>) {
        if self.moments.len() <= id.0 {
            self.moments.resize(id.0 + 1, None);
        }
        self.moments[id.0].get_or_insert_with(|| (vec![F::zero(); numel], vec![F::zero(); numel]))
    }

    /// One in-place update over every trainable parameter using the gradient
    /// currently stored on it. Increments the step counter once.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> TensorResult<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::of(cfg.beta1);
        let b2 = F::of(cfg.beta2);
        let eps = F::of(cfg.eps);
        let lr = F::of(lr);
        let corr1 = F::one() - b1.powi(t);
        let corr2 = F::one() - b2.powi(t);
        for id in store.trainable_ids() {
            let numel = store.get(id).numel();
            let grad = match &store.get(id).grad {
                Some(g) => {
                    if g.len() != numel {
                        return Err(TensorError::Shape {
                            op: "adam_step",
                            detail: format!(
                                "param '{}' has {numel} elements, grad has {}",
                                store.name(id),
                                g.len()
                            ),
                        });
                    }
                    g.clone()
                }
                None => continue,
            };
            let (m, v) = self.slot(id, numel);
            let data = store.get_mut(id).data_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Export moments as named tensors for checkpointing.
    pub fn export(&self, store: &ParamStore<F>) -> Vec<(String, Vec<F>, Vec<F>)> {
        let mut out = Vec::new();
        for (i, slot) in self.moments.iter().enumerate() {
            if let Some((m, v)) = slot {
                out.push((store.name(ParamId(i)).to_owned(), m.clone(), v.clone()));
            }
        }
        out
    }

    pub fn restore(
        store: &ParamStore<F>,
        step: u64,
        entries: Vec<(String, Vec<F>, Vec<F>)>,
    ) -> TensorResult<Self> {
        let mut state = Self::new();
        state.step = step;
        for (name, m, v) in entries {
            let id = store.id_by_name(&name).ok_or_else(|| {
                TensorError::Contract(format!("adam restore: unknown parameter '{name}'"))
            })?;
            let numel = store.get(id).numel();
            if m.len() != numel || v.len() != numel {
                return Err(TensorError::Shape {
                    op: "adam_restore",
                    detail: format!("param '{name}' expects {numel} elements"),
                });
            }
            if state.moments.len() <= id.0 {
                state.moments.resize(id.0 + 1, None);
            }
            state.moments[id.0] = Some((m, v));
        }
        Ok(state)
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm when clipping fired.
pub fn clip_global_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> Option<f64> {
    let mut sq = 0.0f64;
    for id in store.trainable_ids() {
        if let Some(g) = &store.get(id).grad {
            for &x in g {
                let v = x.as_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return None;
    }
    let scale = F::of(max_norm / norm);
    for id in store.trainable_ids() {
        if let Some(g) = &mut store.get_mut(id).grad {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    Some(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(), true);
        store
            .accumulate_grads(vec![(id, vec![0.3, -0.7])])
            .unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.01, &AdamConfig::default()).unwrap();
        let w = store.get(id).data();
        // At t=1: m_hat = g, v_hat = g^2, so dw = -lr * g/(|g| + eps) ~ -lr * sign(g).
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.01)).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1, 1], vec![2.5]).unwrap(), true);
        store.accumulate_grads(vec![(id, vec![0.0])]).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).data()[0], 2.5);
    }

    #[test]
    fn hundred_steps_on_quadratic_match_scalar_reference() {
        // Engine path.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), true);
        let mut adam = AdamState::new();
        let cfg = AdamConfig::default();
        for _ in 0..100 {
            store.zero_grads();
            let w = store.get(id).data()[0];
            store.accumulate_grads(vec![(id, vec![2.0 * w])]).unwrap();
            adam.step(&mut store, 0.1, &cfg).unwrap();
        }
        let w_engine = store.get(id).data()[0];

        // Transparent scalar reference.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((w_engine - w).abs() < 1e-12, "{w_engine} vs {w}");
        assert!(w_engine.abs() < 0.1, "w after 100 steps: {w_engine}");
    }

    #[test]
    fn clip_scales_down_large_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[1, 2]), true);
        store.accumulate_grads(vec![(id, vec![30.0, 40.0])]).unwrap();
        let norm = clip_global_norm(&mut store, 5.0).unwrap();
        assert!((norm - 50.0).abs() < 1e-9);
        let g = store.get(id).grad.as_ref().unwrap();
        let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((new_norm - 5.0).abs() < 1e-9);
        // Under the threshold: untouched.
        assert!(clip_global_norm(&mut store, 5.0).is_none());
    }
}
