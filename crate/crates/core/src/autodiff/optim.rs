use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    /// Plain Adam: AdamW without decoupled decay.
    pub fn adam() -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::default()
        }
    }
}

/// Moment buffers and step counter, indexed like the parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<(), TensorError> {
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for &id in &ids {
            if grads.get(id).is_none() {
                return Err(TensorError::MissingGrad(store.get(id).name.clone()));
            }
        }
        if self.state.m.len() < store.len() {
            for (_, p) in store.iter().skip(self.state.m.len()) {
                self.state.m.push(vec![0.0; p.value.len()]);
                self.state.v.push(vec![0.0; p.value.len()]);
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let p = store.get(id);
            let (m, v) = (&mut self.state.m[id.index()], &mut self.state.v[id.index()]);
            let mut next = p.value.data().to_vec();
            for j in 0..next.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                next[j] -= lr * weight_decay * next[j] + lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.value.shape().to_vec();
            store.set(id, Tensor::new(shape, next)?);
        }
        Ok(())
    }
}

/// Linear ramp from `start_lr` to `peak_lr` over `warmup_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSchedule {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            start_lr: lr,
            peak_lr: lr,
            warmup_steps: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            return self.peak_lr;
        }
        let frac = step as f64 / self.warmup_steps as f64;
        self.start_lr + (self.peak_lr - self.start_lr) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn one_param(v: &[f64]) -> (ParamStore, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: crate::autodiff::ParamId, g: &[f64]) -> ParamGrads {
        // loss = sum(w * g) has gradient g.
        let mut tape = Tape::new(true, 0);
        let w = tape.param(store, id).unwrap();
        let c = tape.constant(Tensor::new(vec![g.len()], g.to_vec()).unwrap(), "g").unwrap();
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap().params(&tape)
    }

    #[test]
    fn zero_betas_give_sign_like_steps() {
        let (mut store, id) = one_param(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg);
        let g = [0.5, -3.0];
        let lr = 0.1;
        let mut expected = vec![1.0, -2.0];
        for _ in 0..2 {
            let grads = grads_for(&store, id, &g);
            opt.step(&mut store, &grads, lr).unwrap();
            for j in 0..2 {
                expected[j] -= lr * g[j] / (g[j].abs() + 1e-8);
            }
            assert_eq!(store.get(id).value.data(), expected.as_slice());
        }
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn zero_lr_or_zero_grad_is_a_no_op() {
        let (mut store, id) = one_param(&[0.3, 0.7]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = grads_for(&store, id, &[1.0, 2.0]);
        opt.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.3, 0.7]);

        let mut opt = AdamW::new(AdamWConfig::adam());
        let grads = grads_for(&store, id, &[0.0, 0.0]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.3, 0.7]);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let (mut store, _) = one_param(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &ParamGrads::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn warmup_schedule() {
        let s = WarmupSchedule {
            start_lr: 1e-5,
            peak_lr: 5e-4,
            warmup_steps: 1000,
        };
        assert_eq!(s.lr_at(0), 1e-5);
        assert!((s.lr_at(500) - 2.55e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(1000), 5e-4);
        assert_eq!(s.lr_at(5000), 5e-4);
        let mut prev = 0.0;
        for t in 0..=1000 {
            assert!(s.lr_at(t) >= prev);
            prev = s.lr_at(t);
        }
    }
}
