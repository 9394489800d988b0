//! Learning-rate schedule and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    /// When set, the rate decays linearly from `lr` after warmup to zero at this step.
    pub decay_to: Option<usize>,
}

impl Schedule {
    pub fn constant_after_warmup(lr: f64, warmup_steps: usize) -> Self {
        Schedule {
            lr,
            warmup_steps,
            decay_to: None,
        }
    }

    /// Rate for a 1-based step.
    pub fn at(&self, step: usize) -> f64 {
        let step = step.max(1);
        let warm = self.warmup_steps.max(1);
        if step < warm {
            return self.lr * step as f64 / warm as f64;
        }
        match self.decay_to {
            Some(end) if end > warm => {
                let left = end.saturating_sub(step) as f64;
                self.lr * left / (end - warm) as f64
            }
            _ => self.lr,
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction and no weight decay. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(params: &[Tensor<T>]) -> Self {
        Adam {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Tensors with `frozen[i]` set are left untouched along with their moments.
    pub fn step<T: Element>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, frozen: &[bool]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || frozen.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} params, {} grads, {} frozen flags, state for {}",
                params.len(),
                grads.len(),
                frozen.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !frozen[i] && !g.is_finite() {
                return Err(Error::NonFinite { kernel: "adam gradient" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = T::from_f64(w.as_f64() - lr * mh / (vh.sqrt() + EPS));
            }
        }
        Ok(())
    }
}
