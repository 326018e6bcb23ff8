//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state is created lazily, only for parameters that are trainable
/// when a step runs.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hp: AdamWParams,
    state: HashMap<String, Moments<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: AdamWParams) -> Self {
        Self {
            hp,
            state: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Number of scalars of optimizer state (two moments per trainable scalar).
    pub fn state_len(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    /// One update at learning rate `lr`. Applies `p ← p·(1 − lr·wd)`, then the
    /// bias-corrected Adam delta, then clears the gradients. Missing
    /// gradients count as zero. Fails before touching anything if a
    /// gradient is non-finite.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        let mut params: Vec<&mut Param<T>> = params.into_iter().filter(|p| p.trainable).collect();
        for p in &params {
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad {
                        param: p.name.clone(),
                    });
                }
            }
        }
        self.t += 1;
        let hp = self.hp;
        let b1 = T::from_f64_lossy(hp.beta1);
        let b2 = T::from_f64_lossy(hp.beta2);
        let one_minus_b1 = T::from_f64_lossy(1.0 - hp.beta1);
        let one_minus_b2 = T::from_f64_lossy(1.0 - hp.beta2);
        let bc1 = T::from_f64_lossy(1.0 - hp.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_lossy(1.0 - hp.beta2.powi(self.t as i32));
        let eps = T::from_f64_lossy(hp.eps);
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(1.0 - lr * hp.weight_decay);

        for p in params.iter_mut() {
            let n = p.value.numel();
            let state = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let grad = p.grad.take();
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                if hp.weight_decay != 0.0 {
                    data[i] = data[i] * decay;
                }
                state.m[i] = b1 * state.m[i] + one_minus_b1 * g;
                state.v[i] = b2 * state.v[i] + one_minus_b2 * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<'a, T: Scalar, I>(params: I, max_norm: f64) -> f64
where
    I: IntoIterator<Item = &'a mut Param<T>>,
{
    let mut params: Vec<&mut Param<T>> = params.into_iter().filter(|p| p.grad.is_some()).collect();
    let norm = params
        .iter()
        .flat_map(|p| p.grad.as_ref().unwrap().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f64_lossy(max_norm / norm);
        for p in params.iter_mut() {
            p.grad
                .as_mut()
                .unwrap()
                .iter_mut()
                .for_each(|v| *v = *v * factor);
        }
    }
    norm
}
