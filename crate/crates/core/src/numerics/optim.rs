//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Scalar>,
    pub v: Vec<Scalar>,
    /// Updates applied to this parameter so far (bias-correction index).
    pub steps: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }
}

/// One AdamW update on a flat parameter. `t` is the 1-based step index.
///
/// The parameter is first scaled by `1 - lr * wd`, then moved along the
/// bias-corrected moment ratio.
pub fn adamw_step(
    param: &mut [Scalar],
    grad: &[Scalar],
    moments: &mut Moments,
    lr: f64,
    cfg: &AdamWConfig,
    t: u64,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(param.len(), grad.len());
    let b1 = cfg.beta1 as Scalar;
    let b2 = cfg.beta2 as Scalar;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = (1.0 - lr * cfg.weight_decay) as Scalar;
    let lr = lr as Scalar;
    let eps = cfg.eps as Scalar;
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
        let m_hat = moments.m[i] / bc1 as Scalar;
        let v_hat = moments.v[i] / bc2 as Scalar;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of completed steps.
    pub step: u64,
    pub moments: Vec<(ParamId, Moments)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let moments = store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Moments::zeros(store.get(id).len())))
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Applies one update to every trainable tensor. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_where(store, lr, |_| true)
    }

    /// Updates only the listed parameters; the rest keep their values and
    /// moments untouched, as if they had no gradient this step.
    pub fn step_active(&mut self, store: &mut ParamStore, lr: f64, active: &[ParamId]) -> Result<()> {
        self.step_where(store, lr, |id| active.binary_search(&id).is_ok())
    }

    fn step_where(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        active: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        for (id, _) in &self.moments {
            if !active(*id) {
                continue;
            }
            let g = store.grad(*id).unwrap_or(&[]);
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {} at element {}",
                    store.name(*id),
                    pos
                )));
            }
        }
        self.step += 1;
        for (id, mom) in &mut self.moments {
            if !active(*id) {
                continue;
            }
            mom.steps += 1;
            let t = mom.steps;
            let tensor = store.get_mut(*id);
            let grad = tensor.grad.take().expect("trainable tensor without grad");
            adamw_step(tensor.data_mut(), &grad, mom, lr, &self.config, t);
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}
