//! Hard Concrete feature-map gates.
//!
//! Each gated convolution owns one location parameter `log_alpha` per
//! output channel. During training the gate value is a reparameterized
//! sample of the stretched-and-clamped Binary Concrete distribution; at
//! inference the noise is replaced by its mean, which makes channels with
//! `log_alpha` below [`HcConfig::death_threshold`] exactly zero.

use crate::autodiff::{Graph, StretchParams, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Keeps the uniform noise away from 0 and 1 before taking its logit.
pub const NOISE_CLAMP: f64 = 1e-7;

/// Shape parameters `(beta, gamma, zeta)` of the Hard Concrete distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HcConfig {
    /// Temperature.
    pub beta: f64,
    /// Lower stretch limit, negative.
    pub gamma: f64,
    /// Upper stretch limit, above one.
    pub zeta: f64,
}

impl Default for HcConfig {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl HcConfig {
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        if !(beta > 0.0) || !(gamma < 0.0) || !(zeta > 1.0) {
            return Err(Error::Argument(format!(
                "hard concrete needs beta > 0, gamma < 0 < 1 < zeta; got ({beta}, {gamma}, {zeta})"
            )));
        }
        Ok(Self { beta, gamma, zeta })
    }

    pub(crate) fn stretch(&self) -> StretchParams {
        StretchParams { beta: self.beta, gamma: self.gamma, zeta: self.zeta }
    }

    /// Gate value for a given noise logit `u = log(eps) - log(1 - eps)`.
    pub fn icdf(&self, u: f64, log_alpha: f64) -> f64 {
        let s = sigmoid((u + log_alpha) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// Deterministic gate (noise at its mean, `u = 0`).
    pub fn deterministic(&self, log_alpha: f64) -> f64 {
        self.icdf(0.0, log_alpha)
    }

    /// `P(z > 0)` for one gate.
    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.beta * (-self.gamma / self.zeta).ln())
    }

    /// Largest `log_alpha` whose deterministic gate is exactly zero:
    /// `beta * logit(-gamma / (zeta - gamma))`.
    pub fn death_threshold(&self) -> f64 {
        let p = -self.gamma / (self.zeta - self.gamma);
        self.beta * (p / (1.0 - p)).ln()
    }

    /// CDF of the stretched and clamped distribution at `x in [0, 1]`.
    /// Has a jump of `P(z=0)` at 0 and reaches 1 only at `x = 1`.
    pub fn cdf(&self, x: f64, log_alpha: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let s = (x - self.gamma) / (self.zeta - self.gamma);
        sigmoid(self.beta * (s / (1.0 - s)).ln() - log_alpha)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learnable gate parameters of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub log_alpha: Vec<f32>,
    pub hc: HcConfig,
    /// Set on the 1x1 residual convolution of pooling blocks: at least one
    /// channel always survives there.
    pub clamp_protect: bool,
}

/// Whether a gate sample was drawn or computed from the noise mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub z: Vec<f64>,
    pub mode: SampleMode,
}

/// `log_alpha ~ U(0, 0.01)` i.i.d.
pub fn init_gate_params(channels: usize, rng: &mut Rng) -> Result<GateParams> {
    if channels == 0 {
        return Err(Error::Argument("gate parameters need at least one channel".into()));
    }
    let log_alpha = (0..channels).map(|_| rng.uniform_range(0.0, 0.01) as f32).collect();
    Ok(GateParams { log_alpha, hc: HcConfig::default(), clamp_protect: false })
}

/// Draws `eps ~ U(NOISE_CLAMP, 1 - NOISE_CLAMP)` per channel and returns
/// the noise logits.
pub fn draw_noise(channels: usize, rng: &mut Rng) -> Vec<f64> {
    (0..channels)
        .map(|_| {
            let eps = rng.uniform().clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP);
            noise_logit(eps)
        })
        .collect()
}

pub fn noise_logit(eps: f64) -> f64 {
    let eps = eps.clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP);
    eps.ln() - (1.0 - eps).ln()
}

impl GateParams {
    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// Stochastic sample through the inverse CDF.
    pub fn sample(&self, rng: &mut Rng) -> GateSample {
        let noise = draw_noise(self.len(), rng);
        let z = self.log_alpha.iter().zip(&noise).map(|(&a, &u)| self.hc.icdf(u, a as f64)).collect();
        GateSample { z, mode: SampleMode::Stochastic }
    }

    pub fn deterministic(&self) -> GateSample {
        let z = self.log_alpha.iter().map(|&a| self.hc.deterministic(a as f64)).collect();
        GateSample { z, mode: SampleMode::Deterministic }
    }

    /// Channels that survive hard pruning.
    pub fn alive_mask(&self) -> Vec<bool> {
        let mut alive: Vec<bool> = self.deterministic().z.iter().map(|&z| z > 0.0).collect();
        if self.clamp_protect && !alive.iter().any(|&a| a) {
            let mut best = 0;
            for (i, &a) in self.log_alpha.iter().enumerate() {
                if a > self.log_alpha[best] {
                    best = i;
                }
            }
            alive[best] = true;
        }
        alive
    }

    pub fn alive_count(&self) -> usize {
        self.alive_mask().iter().filter(|&&a| a).count()
    }

    /// Deterministic gate values after the clamp: protected channels that
    /// were forced alive keep a multiplier of at least the smallest
    /// positive gate instead of zero.
    pub fn inference_gates(&self) -> Vec<f64> {
        let det = self.deterministic().z;
        self.alive_mask()
            .iter()
            .zip(det)
            .map(|(&alive, z)| if alive && z == 0.0 { CLAMP_FLOOR } else { z })
            .collect()
    }

    /// Expected number of nonzero gates, `sum_i P(z_i > 0)`.
    pub fn hc_sparsity_loss(&self) -> f64 {
        self.log_alpha.iter().map(|&a| self.hc.prob_nonzero(a as f64)).sum()
    }

    /// Per-channel `P(z_i > 0)`.
    pub fn prob_nonzero(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|&a| self.hc.prob_nonzero(a as f64)).collect()
    }
}

/// Multiplier given to a clamp-protected channel whose deterministic gate
/// is zero. Without it the kept channel would carry no signal.
pub const CLAMP_FLOOR: f64 = 1.0;

// ---- graph builders ---------------------------------------------------------

/// Puts `log_alpha` on the tape as a differentiable leaf.
pub fn log_alpha_leaf<T: Scalar>(g: &mut Graph<T>, phi: &GateParams, trainable: bool) -> Var {
    let t = Tensor::from_vec(phi.log_alpha.iter().map(|&a| T::from_f64(a as f64)).collect());
    if trainable {
        g.param(t)
    } else {
        g.constant(t)
    }
}

/// Reparameterized gate sample `z(log_alpha, eps)` on the tape.
pub fn sample_gates_node<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: Var,
    hc: &HcConfig,
    noise: &[f64],
) -> Result<Var> {
    let noise: Vec<T> = noise.iter().map(|&u| T::from_f64(u)).collect();
    g.hard_concrete(log_alpha, &noise, hc.stretch())
}

/// Deterministic gates on the tape (noise logit fixed at zero).
pub fn deterministic_gates_node<T: Scalar>(g: &mut Graph<T>, log_alpha: Var, hc: &HcConfig) -> Result<Var> {
    let n = g.value(log_alpha).numel();
    g.hard_concrete(log_alpha, &vec![T::zero(); n], hc.stretch())
}

/// Per-channel `P(z > 0)` on the tape.
pub fn prob_nonzero_node<T: Scalar>(g: &mut Graph<T>, log_alpha: Var, hc: &HcConfig) -> Var {
    let shift = -hc.beta * (-hc.gamma / hc.zeta).ln();
    let shifted = g.add_scalar(log_alpha, T::from_f64(shift));
    g.sigmoid(shifted)
}

/// `L_HC = sum_i P(z_i > 0)` on the tape.
pub fn hc_sparsity_loss_node<T: Scalar>(g: &mut Graph<T>, log_alpha: Var, hc: &HcConfig) -> Var {
    let p = prob_nonzero_node(g, log_alpha, hc);
    g.sum(p)
}

/// Broadcast-multiplies gate values over the spatial dims of `h`.
pub fn apply_gates<T: Scalar>(g: &mut Graph<T>, h: Var, z: Var) -> Result<Var> {
    g.channel_mul(h, z)
}
