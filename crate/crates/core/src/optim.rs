//! Adam with classic L2 weight decay folded into the gradient.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One parameter tensor taking part in a step.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f32],
    pub grad: &'a [f32],
    pub lr: f64,
    pub weight_decay: f64,
}

/// Adam state over a fixed, ordered list of parameter tensors. Slot `k` of
/// every call to [`Adam::step`] must refer to the same tensor.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for (k, s) in slots.iter().enumerate() {
            if s.value.len() != s.grad.len() {
                return Err(Error::Dimension(format!(
                    "adam slot {k}: {} values but {} gradients",
                    s.value.len(),
                    s.grad.len()
                )));
            }
            if let Some(m) = self.m.get(k) {
                if m.len() != s.value.len() {
                    return Err(Error::Dimension(format!("adam slot {k} changed size")));
                }
            }
            if let Some(i) = s.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of slot {k}, element {i}")));
            }
        }
        while self.m.len() < slots.len() {
            let n = slots[self.m.len()].value.len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, s) in slots.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..s.value.len() {
                let w = s.value[i] as f64;
                let g = s.grad[i] as f64 + s.weight_decay * w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                s.value[i] = (w - s.lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
