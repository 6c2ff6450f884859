//! Budget metrics, the barrier and its moving upper margin.
//!
//! Costs are described per gated convolution by a [`LayerCost`]; a layer's
//! input channels are the union of the alive channels of its producers,
//! because residual sums share a channel numbering.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gates::{self, GateParams};
use crate::tensor::{Scalar, Tensor};

/// Value of the barrier at and beyond the upper margin.
pub const BARRIER_CAP: f64 = 1e30;

/// Fraction of `V_F` separating the lower margin from the budget.
pub const LOWER_MARGIN: f64 = 1e-4;

pub const EXP_RATE: f64 = 5.0;

pub const DEFAULT_SIGMOID_D: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Volume,
    Flops,
}

/// Where a convolution reads its input from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CostInput {
    /// Ungated source with a fixed channel count.
    Image { channels: usize },
    /// Slot-wise union of the output channels of these layers (equal widths).
    Layers(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer_id: usize,
    /// Output area `H' * W'`.
    pub area: usize,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input: CostInput,
}

fn check_wiring(gates: &[GateParams], costs: &[LayerCost]) -> Result<()> {
    if gates.len() != costs.len() {
        return Err(Error::Graph(format!("{} gate vectors for {} layers", gates.len(), costs.len())));
    }
    for (l, (phi, c)) in gates.iter().zip(costs).enumerate() {
        if phi.len() != c.out_channels {
            return Err(Error::Graph(format!(
                "layer {l}: {} gates for {} output channels",
                phi.len(),
                c.out_channels
            )));
        }
        if let CostInput::Layers(preds) = &c.input {
            if preds.is_empty() {
                return Err(Error::Graph(format!("layer {l}: empty predecessor list")));
            }
            for &p in preds {
                if p >= costs.len() || costs[p].out_channels != c.in_channels {
                    return Err(Error::Graph(format!("layer {l}: unresolved predecessor {p}")));
                }
            }
        }
    }
    Ok(())
}

/// `V = sum_l |alive_l| * A_l`.
pub fn hard_volume(gates: &[GateParams], costs: &[LayerCost]) -> Result<f64> {
    check_wiring(gates, costs)?;
    Ok(gates.iter().zip(costs).map(|(phi, c)| (phi.alive_count() * c.area) as f64).sum())
}

/// `sum_l alive_out * alive_in * k^2 * A_l`, one multiply-accumulate per FLOP.
pub fn hard_flops(gates: &[GateParams], costs: &[LayerCost]) -> Result<f64> {
    check_wiring(gates, costs)?;
    let masks: Vec<Vec<bool>> = gates.iter().map(GateParams::alive_mask).collect();
    let mut total = 0.0;
    for (l, c) in costs.iter().enumerate() {
        let out = masks[l].iter().filter(|&&a| a).count();
        let inp = match &c.input {
            CostInput::Image { channels } => *channels,
            CostInput::Layers(preds) => {
                (0..c.in_channels).filter(|&s| preds.iter().any(|&p| masks[p][s])).count()
            }
        };
        total += (out * inp * c.kernel * c.kernel * c.area) as f64;
    }
    Ok(total)
}

/// Unpruned value of a metric.
pub fn full_cost(costs: &[LayerCost], metric: Metric) -> f64 {
    costs
        .iter()
        .map(|c| match metric {
            Metric::Volume => (c.out_channels * c.area) as f64,
            Metric::Flops => {
                let inp = match c.input {
                    CostInput::Image { channels } => channels,
                    CostInput::Layers(_) => c.in_channels,
                };
                (c.out_channels * inp * c.kernel * c.kernel * c.area) as f64
            }
        })
        .sum()
}

pub fn hard_cost(gates: &[GateParams], costs: &[LayerCost], metric: Metric) -> Result<f64> {
    match metric {
        Metric::Volume => hard_volume(gates, costs),
        Metric::Flops => hard_flops(gates, costs),
    }
}

/// `L_S = sum_l A_l * L_HC(phi_l)` on the tape. `log_alpha[l]` holds the
/// gate leaf of layer `l`.
pub fn expected_volume_loss<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: &[Var],
    gates: &[GateParams],
    costs: &[LayerCost],
) -> Result<Var> {
    check_wiring(gates, costs)?;
    let mut terms = Vec::with_capacity(costs.len());
    for (l, c) in costs.iter().enumerate() {
        let s = gates::hc_sparsity_loss_node(g, log_alpha[l], &gates[l].hc);
        terms.push(g.scale(s, T::from_f64(c.area as f64)));
    }
    sum_scalars(g, &terms)
}

/// Expected FLOPs: `E[out_l] * E[in_l] * k^2 * A_l`, where `E[in_l]` is the
/// expected size of the slot-wise union of the producers' alive sets under
/// independent gates. With a single producer it is that producer's `L_HC`.
pub fn expected_flop_loss<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: &[Var],
    gates: &[GateParams],
    costs: &[LayerCost],
) -> Result<Var> {
    check_wiring(gates, costs)?;
    let probs: Vec<Var> =
        (0..costs.len()).map(|l| gates::prob_nonzero_node(g, log_alpha[l], &gates[l].hc)).collect();
    let mut terms = Vec::with_capacity(costs.len());
    for (l, c) in costs.iter().enumerate() {
        let e_out = g.sum(probs[l]);
        let e_in = match &c.input {
            CostInput::Image { channels } => {
                let k = T::from_f64((*channels * c.kernel * c.kernel * c.area) as f64);
                terms.push(g.scale(e_out, k));
                continue;
            }
            CostInput::Layers(preds) if preds.len() == 1 => g.sum(probs[preds[0]]),
            CostInput::Layers(preds) => {
                // 1 - prod_p (1 - p)
                let mut none = None;
                for &p in preds {
                    let neg = g.scale(probs[p], -T::one());
                    let q = g.add_scalar(neg, T::one());
                    none = Some(match none {
                        None => q,
                        Some(acc) => g.mul(acc, q)?,
                    });
                }
                let none = none.expect("non-empty predecessor list");
                let neg = g.scale(none, -T::one());
                let any = g.add_scalar(neg, T::one());
                g.sum(any)
            }
        };
        let prod = g.mul(e_out, e_in)?;
        terms.push(g.scale(prod, T::from_f64((c.kernel * c.kernel * c.area) as f64)));
    }
    sum_scalars(g, &terms)
}

pub fn expected_cost_loss<T: Scalar>(
    g: &mut Graph<T>,
    log_alpha: &[Var],
    gates: &[GateParams],
    costs: &[LayerCost],
    metric: Metric,
) -> Result<Var> {
    match metric {
        Metric::Volume => expected_volume_loss(g, log_alpha, gates, costs),
        Metric::Flops => expected_flop_loss(g, log_alpha, gates, costs),
    }
}

fn sum_scalars<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match terms.split_first() {
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| g.add(acc, t)),
    }
}

/// `f(V, a, b) = (V - a)^2 / ((b - V)(b - a))` on `(a, b)`, zero at or below
/// `a` and [`BARRIER_CAP`] at or above `b`.
pub fn barrier(v: f64, a: f64, b: f64) -> Result<f64> {
    if !(a < b) {
        return Err(Error::Argument(format!("barrier margins need a < b, got a={a}, b={b}")));
    }
    Ok(if v <= a {
        0.0
    } else if v >= b {
        BARRIER_CAP
    } else {
        ((v - a) * (v - a) / ((b - v) * (b - a))).min(BARRIER_CAP)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Linear,
    /// `(1 - e^{-k i}) / (1 - e^{-k})`.
    Exp { k: f64 },
    /// `(sigmoid(d (i - 1/2)) - delta) / (1 - 2 delta)`, `delta = sigmoid(-d/2)`.
    Sigmoid { d: f64 },
}

/// Budget transition `T(i)` with `T(0) = 0`, `T(1) = 1`. Progress outside
/// `[0, 1]` is clamped with a warning.
pub fn transition(i: f64, schedule: Schedule) -> f64 {
    let i = if (0.0..=1.0).contains(&i) {
        i
    } else {
        log::warn!("budget progress {i} outside [0, 1], clamping");
        i.clamp(0.0, 1.0)
    };
    if i == 0.0 {
        return 0.0;
    }
    if i == 1.0 {
        return 1.0;
    }
    match schedule {
        Schedule::Linear => i,
        Schedule::Exp { k } => (1.0 - (-k * i).exp()) / (1.0 - (-k).exp()),
        Schedule::Sigmoid { d } => {
            let delta = gates::sigmoid(-0.5 * d);
            (gates::sigmoid(d * (i - 0.5)) - delta) / (1.0 - 2.0 * delta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetState {
    pub v_full: f64,
    pub budget: f64,
    /// Lower margin `B - 1e-4 V_F`, fixed.
    pub a: f64,
    /// Upper margin, slides from `V_F` to `B`.
    pub b: f64,
    pub metric: Metric,
    pub schedule: Schedule,
    pub progress: f64,
}

impl BudgetState {
    pub fn new(v_full: f64, budget: f64, metric: Metric, schedule: Schedule) -> Result<Self> {
        if !(budget > 0.0 && budget < v_full) {
            return Err(Error::Argument(format!("budget {budget} must lie in (0, {v_full})")));
        }
        Ok(Self {
            v_full,
            budget,
            a: budget - LOWER_MARGIN * v_full,
            b: v_full,
            metric,
            schedule,
            progress: 0.0,
        })
    }

    pub fn from_fraction(v_full: f64, fraction: f64, metric: Metric, schedule: Schedule) -> Result<Self> {
        Self::new(v_full, fraction * v_full, metric, schedule)
    }

    pub fn barrier(&self, v: f64) -> f64 {
        barrier(v, self.a, self.b).expect("a < B <= b by construction")
    }
}

/// `b = (1 - T(i)) V_F + T(i) B`.
pub fn update_budget(state: &BudgetState, i: f64) -> BudgetState {
    let t = transition(i, state.schedule);
    let b = if t == 1.0 { state.budget } else { (1.0 - t) * state.v_full + t * state.budget };
    BudgetState { b, progress: i.clamp(0.0, 1.0), ..*state }
}

/// `L_S * f(V, a, b)`, with `f` entering as a constant coefficient.
pub fn bar_loss<T: Scalar>(g: &mut Graph<T>, sparsity: Var, coefficient: f64) -> Var {
    g.scale(sparsity, T::from_f64(coefficient))
}
