use crate::autodiff::{BnStats, Graph, Var};
use crate::error::{Error, Result};
use crate::gates::{self, GateParams};
use crate::kernels;
use crate::tensor::{Rng, Scalar, Tensor};

use super::spec::{Layout, NetworkSpec};

/// Weights of one convolution unit (conv, batch norm). Convolutions carry no
/// bias; the batch-norm shift plays that role.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Dense gated network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layout: Layout,
    pub convs: Vec<ConvParams>,
    pub bn: Vec<BnStats<f32>>,
    pub head_w: Tensor<f32>,
    pub head_b: Vec<f32>,
    pub gates: Vec<GateParams>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect())
        .expect("positive dims")
}

/// Kaiming-uniform weights, unit batch-norm scale, `log_alpha ~ U(0, 0.01)`.
/// Residual 1x1 convolutions of pooling blocks get clamp-protected gates.
pub fn build_network(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
    let layout = spec.layout()?;
    let mut convs = Vec::with_capacity(layout.convs.len());
    let mut gate_params = Vec::with_capacity(layout.convs.len());
    for c in &layout.convs {
        convs.push(ConvParams {
            weight: kaiming_uniform(&c.weight_shape(), c.cin * c.kernel * c.kernel, rng),
            gamma: vec![1.0; c.cout],
            beta: vec![0.0; c.cout],
        });
    }
    for c in &layout.convs {
        let mut phi = gates::init_gate_params(c.cout, rng)?;
        phi.clamp_protect = matches!(c.role, super::ConvRole::Residual { .. });
        gate_params.push(phi);
    }
    let head_w = kaiming_uniform(&[spec.num_classes, layout.final_width], layout.final_width, rng);
    Ok(Network {
        spec: spec.clone(),
        bn: layout.convs.iter().map(|c| BnStats::new(c.cout)).collect(),
        layout,
        convs,
        head_w,
        head_b: vec![0.0; spec.num_classes],
        gates: gate_params,
    })
}

/// How gate values enter a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// No gates (teacher).
    Ones,
    /// Reparameterized samples at the given noise logits, one vector per conv.
    Sampled(&'a [Vec<f64>]),
    /// Constant gate values, one vector per conv.
    Fixed(&'a [Vec<f32>]),
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles of every parameter of a [`Network`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub convs: Vec<ConvVars>,
    pub head_w: Var,
    pub head_b: Var,
    pub log_alpha: Vec<Var>,
}

impl BoundParams {
    /// Weight handles in [`Network::weight_values`] order.
    pub fn weights(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.convs.iter().flat_map(|c| [c.weight, c.gamma, c.beta]).collect();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    /// Inverse of [`Network::flat_tensors`] ordering.
    pub fn from_flat(n_convs: usize, vars: &[Var]) -> Result<Self> {
        if vars.len() != 4 * n_convs + 2 {
            return Err(Error::Argument(format!("expected {} parameter handles, got {}", 4 * n_convs + 2, vars.len())));
        }
        let convs = (0..n_convs)
            .map(|i| ConvVars { weight: vars[3 * i], gamma: vars[3 * i + 1], beta: vars[3 * i + 2] })
            .collect();
        Ok(Self {
            convs,
            head_w: vars[3 * n_convs],
            head_b: vars[3 * n_convs + 1],
            log_alpha: vars[3 * n_convs + 2..].to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Gate node of each conv, absent in [`GateMode::Ones`].
    pub gates: Vec<Option<Var>>,
    pub block_outputs: Vec<Var>,
}

fn cast_tensor<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    t.cast()
}

fn cast_vec<T: Scalar>(v: &[f32]) -> Tensor<T> {
    Tensor::from_vec(v.iter().map(|&x| T::from_f64(x as f64)).collect())
}

impl Network {
    /// Weight tensors in canonical order: per conv `(weight, gamma, beta)`,
    /// then head weight and bias.
    pub fn weight_values(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> =
            self.convs.iter().flat_map(|c| [c.weight.data(), &c.gamma[..], &c.beta[..]]).collect();
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }

    pub fn weight_values_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::with_capacity(3 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(c.weight.data_mut());
            out.push(&mut c.gamma);
            out.push(&mut c.beta);
        }
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    /// Weights followed by the per-conv `log_alpha` vectors.
    pub fn flat_tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(4 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(cast_tensor(&c.weight));
            out.push(cast_vec(&c.gamma));
            out.push(cast_vec(&c.beta));
        }
        out.push(cast_tensor(&self.head_w));
        out.push(cast_vec(&self.head_b));
        for phi in &self.gates {
            out.push(cast_vec(&phi.log_alpha));
        }
        out
    }

    /// Puts every parameter on the tape.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, train_weights: bool, train_gates: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .flat_tensors::<T>()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let trainable = if i < 3 * self.convs.len() + 2 { train_weights } else { train_gates };
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams::from_flat(self.convs.len(), &vars).expect("consistent ordering")
    }

    /// Gate values used at inference: deterministic gates with the
    /// pooling-residual clamp applied.
    pub fn inference_gates(&self) -> Vec<Vec<f32>> {
        self.gates.iter().map(|phi| phi.inference_gates().into_iter().map(|z| z as f32).collect()).collect()
    }

    pub fn alive_masks(&self) -> Vec<Vec<bool>> {
        self.gates.iter().map(GateParams::alive_mask).collect()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_channels * self.spec.input_size * self.spec.input_size
    }

    /// Eval-mode logits for `images` (`[n, c, h, w]` flattened), in batches.
    pub fn predict(&self, images: &[f32], mode: GateMode<'_>, batch: usize) -> Result<Vec<f32>> {
        let per = self.input_len();
        if images.len() % per != 0 {
            return Err(Error::Dimension(format!("{} input values not a multiple of {per}", images.len())));
        }
        let s = self.spec.input_size;
        let mut out = Vec::with_capacity(images.len() / per * self.spec.num_classes);
        let mut bn = self.bn.clone();
        for chunk in images.chunks(batch.max(1) * per) {
            let mut g = Graph::<f32>::new();
            let p = self.bind(&mut g, false, false);
            let x = Tensor::new(vec![chunk.len() / per, self.spec.input_channels, s, s], chunk.to_vec())?;
            let x = g.constant(x);
            let f = forward(&mut g, &self.layout, &self.gates, &p, &mut bn, x, mode, false)?;
            out.extend_from_slice(g.value(f.logits).data());
        }
        Ok(out)
    }
}

/// Residual forward pass. Each convolution unit is conv, batch norm, ReLU,
/// gate; blocks add their delta to the carried signal, pooling blocks to the
/// output of their residual unit.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    layout: &Layout,
    gate_params: &[GateParams],
    p: &BoundParams,
    bn: &mut [BnStats<T>],
    x: Var,
    mode: GateMode<'_>,
    training: bool,
) -> Result<Forward> {
    let n = layout.convs.len();
    if bn.len() != n || gate_params.len() != n || p.convs.len() != n {
        return Err(Error::Graph("parameter count does not match layout".into()));
    }
    match mode {
        GateMode::Sampled(v) if v.len() != n => return Err(Error::Graph("noise vectors per conv".into())),
        GateMode::Fixed(v) if v.len() != n => return Err(Error::Graph("gate vectors per conv".into())),
        _ => {}
    }
    let mut gate_vars = vec![None; n];
    let mut unit = |g: &mut Graph<T>, id: usize, input: Var| -> Result<Var> {
        let c = &layout.convs[id];
        let cv = p.convs[id];
        let h = g.conv2d(input, cv.weight, c.stride, c.pad)?;
        let h = g.batchnorm2d(h, cv.gamma, cv.beta, &mut bn[id], training)?;
        let h = g.relu(h);
        let z = match mode {
            GateMode::Ones => return Ok(h),
            GateMode::Sampled(noise) => gates::sample_gates_node(g, p.log_alpha[id], &gate_params[id].hc, &noise[id])?,
            GateMode::Fixed(values) => g.constant(cast_vec(&values[id])),
        };
        gate_vars[id] = Some(z);
        gates::apply_gates(g, h, z)
    };
    let mut h = unit(g, 0, x)?;
    let mut block_outputs = Vec::with_capacity(layout.blocks.len());
    for b in &layout.blocks {
        let d = unit(g, b.delta[0], h)?;
        let d = unit(g, b.delta[1], d)?;
        let base = match b.residual {
            Some(r) => unit(g, r, h)?,
            None => h,
        };
        h = g.add(base, d)?;
        block_outputs.push(h);
    }
    let pooled = g.global_avg_pool(h)?;
    let logits = g.linear(pooled, p.head_w, p.head_b)?;
    Ok(Forward { logits, gates: gate_vars, block_outputs })
}

/// Top-1 accuracy of row-major logits; ties go to the lowest class index.
pub fn accuracy(logits: &[f32], labels: &[u8], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| kernels::argmax(row) == l as usize)
        .count();
    hits as f64 / labels.len() as f64
}
