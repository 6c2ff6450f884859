use crate::autodiff::BN_EPS;
use crate::budget::{full_cost, Metric};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};

use super::model::Network;
use super::spec::{Layout, NetworkSpec};

/// A convolution unit with dead channels physically removed.
///
/// Batch norm (eval mode) and the deterministic gate are folded in, so the
/// unit computes `relu(conv(x, weight) + bias)`; this is exact because gates
/// are non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedConv {
    /// Convolution id in the layout.
    pub conv: usize,
    /// Consumed input channels, in the producer's numbering.
    pub in_idx: Vec<u32>,
    /// Surviving output channels.
    pub out_idx: Vec<u32>,
    /// `[out_idx.len(), in_idx.len(), k, k]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// A residual block of the mixed-connectivity graph.
///
/// Index lists refer to the canonical channel slots of the stage's main
/// signal. The output carries `i_out = i_base ∪ i_delta`, where the base is
/// `i_in` for identity blocks and `i_res` for pooling blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedBlock {
    pub block: usize,
    pub i_in: Vec<u32>,
    pub residual: Option<PrunedConv>,
    /// Both delta convolutions, or none when every one of them is dead.
    pub delta: Vec<PrunedConv>,
    pub i_res: Vec<u32>,
    pub i_delta: Vec<u32>,
    /// Full width of the block output.
    pub n_res: usize,
    pub i_out: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedGraph {
    pub spec: NetworkSpec,
    pub layout: Layout,
    pub stem: PrunedConv,
    pub blocks: Vec<PrunedBlock>,
    /// Head weight restricted to the columns in `final_idx`.
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    pub final_idx: Vec<u32>,
}

pub(crate) fn union(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn alive_indices(mask: &[bool]) -> Vec<u32> {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32).collect()
}

fn prune_conv(net: &Network, id: usize, in_idx: &[u32], alive: &[bool], z: &[f64]) -> PrunedConv {
    let c = &net.layout.convs[id];
    let p = &net.convs[id];
    let stats = &net.bn[id];
    let out_idx = alive_indices(alive);
    let kk = c.kernel * c.kernel;
    let mut weight = Vec::with_capacity(out_idx.len() * in_idx.len() * kk);
    let mut bias = Vec::with_capacity(out_idx.len());
    let w = p.weight.data();
    for &o in &out_idx {
        let o = o as usize;
        let inv = 1.0 / (stats.var[o] as f64 + BN_EPS).sqrt();
        let g = p.gamma[o] as f64 * inv;
        let scale = z[o] * g;
        bias.push((z[o] * (p.beta[o] as f64 - stats.mean[o] as f64 * g)) as f32);
        for &i in in_idx {
            let base = (o * c.cin + i as usize) * kk;
            weight.extend(w[base..base + kk].iter().map(|&v| (v as f64 * scale) as f32));
        }
    }
    PrunedConv { conv: id, in_idx: in_idx.to_vec(), out_idx, weight, bias }
}

/// Thresholds the gates and rewrites the network into a graph that only
/// computes alive channels.
///
/// A block is dropped when every convolution of its delta branch is dead; a
/// pooling block in that state keeps just its residual unit.
pub fn hard_prune(net: &Network) -> Result<PrunedGraph> {
    let layout = &net.layout;
    let masks = net.alive_masks();
    let z: Vec<Vec<f64>> = net.gates.iter().map(|phi| phi.inference_gates()).collect();
    let image: Vec<u32> = (0..net.spec.input_channels as u32).collect();
    let stem = prune_conv(net, 0, &image, &masks[0], &z[0]);
    let mut signal = stem.out_idx.clone();
    let mut blocks = Vec::new();
    for (bi, b) in layout.blocks.iter().enumerate() {
        let [c1, c2] = b.delta;
        let delta_dead = masks[c1].iter().chain(&masks[c2]).all(|&a| !a);
        let delta = if delta_dead {
            Vec::new()
        } else {
            let first = prune_conv(net, c1, &signal, &masks[c1], &z[c1]);
            let second = prune_conv(net, c2, &first.out_idx.clone(), &masks[c2], &z[c2]);
            vec![first, second]
        };
        let i_delta = delta.get(1).map_or_else(Vec::new, |d| d.out_idx.clone());
        let residual = b.residual.map(|r| prune_conv(net, r, &signal, &masks[r], &z[r]));
        if residual.is_none() && delta.is_empty() {
            continue;
        }
        let i_res = residual.as_ref().map_or_else(Vec::new, |r| r.out_idx.clone());
        if residual.is_some() && i_res.is_empty() {
            return Err(Error::Graph(format!("pooling block {bi} lost every residual channel")));
        }
        let base = if residual.is_some() { &i_res } else { &signal };
        let i_out = union(base, &i_delta);
        blocks.push(PrunedBlock {
            block: bi,
            i_in: signal.clone(),
            residual,
            delta,
            i_res,
            i_delta,
            n_res: b.width,
            i_out: i_out.clone(),
        });
        signal = i_out;
    }
    if signal.is_empty() {
        return Err(Error::Graph("no alive channel reaches the classifier".into()));
    }
    let fw = layout.final_width;
    let classes = net.spec.num_classes;
    let head = net.head_w.data();
    let mut head_w = Vec::with_capacity(classes * signal.len());
    for k in 0..classes {
        head_w.extend(signal.iter().map(|&s| head[k * fw + s as usize]));
    }
    Ok(PrunedGraph {
        spec: net.spec.clone(),
        layout: layout.clone(),
        stem,
        blocks,
        head_w,
        head_b: net.head_b.clone(),
        final_idx: signal,
    })
}

/// Compact activations: channel `j` of `data` is canonical slot `idx[j]`.
struct Signal {
    idx: Vec<u32>,
    data: Vec<f32>,
    size: usize,
}

impl PrunedGraph {
    fn unit(&self, pc: &PrunedConv, x: &[f32], n: usize, in_size: usize) -> Result<(Vec<f32>, usize)> {
        let c = &self.layout.convs[pc.conv];
        let (cin, cout) = (pc.in_idx.len(), pc.out_idx.len());
        let p = c.out_size * c.out_size;
        if cout == 0 {
            return Ok((Vec::new(), c.out_size));
        }
        let mut y = if cin == 0 {
            vec![0.0; n * cout * p]
        } else {
            let g = ConvGeom::new(&[n, cin, in_size, in_size], &[cout, cin, c.kernel, c.kernel], c.stride, c.pad)?;
            kernels::conv2d_forward(x, &pc.weight, &g).0
        };
        for (i, v) in y.iter_mut().enumerate() {
            *v = (*v + pc.bias[(i / p) % cout]).max(0.0);
        }
        Ok((y, c.out_size))
    }

    /// Logits of `n` images (`[n, c, h, w]` flattened).
    pub fn forward(&self, images: &[f32], n: usize) -> Result<Vec<f32>> {
        let s = self.spec.input_size;
        if images.len() != n * self.spec.input_channels * s * s {
            return Err(Error::Dimension(format!("pruned forward: {} values for {n} images", images.len())));
        }
        let (data, size) = self.unit(&self.stem, images, n, s)?;
        let mut sig = Signal { idx: self.stem.out_idx.clone(), data, size };
        for b in &self.blocks {
            let p = {
                let c = &self.layout.convs[self.layout.blocks[b.block].delta[0]];
                c.out_size * c.out_size
            };
            let width = b.i_out.len();
            let mut out = vec![0.0f32; n * width * p];
            let scatter = |out: &mut [f32], src: &[f32], idx: &[u32]| {
                let pos: Vec<usize> = idx.iter().map(|i| b.i_out.binary_search(i).expect("subset of i_out")).collect();
                for ni in 0..n {
                    for (j, &o) in pos.iter().enumerate() {
                        let from = &src[(ni * idx.len() + j) * p..(ni * idx.len() + j + 1) * p];
                        let to = &mut out[(ni * width + o) * p..(ni * width + o + 1) * p];
                        for (t, f) in to.iter_mut().zip(from) {
                            *t += f;
                        }
                    }
                }
            };
            match &b.residual {
                Some(r) => {
                    let (res, _) = self.unit(r, &sig.data, n, sig.size)?;
                    scatter(&mut out, &res, &b.i_res);
                }
                None => scatter(&mut out, &sig.data, &sig.idx),
            }
            if !b.i_delta.is_empty() {
                let (d1, s1) = self.unit(&b.delta[0], &sig.data, n, sig.size)?;
                let (d2, _) = self.unit(&b.delta[1], &d1, n, s1)?;
                scatter(&mut out, &d2, &b.i_delta);
            }
            let size = self.layout.convs[self.layout.blocks[b.block].delta[0]].out_size;
            sig = Signal { idx: b.i_out.clone(), data: out, size };
        }
        let p = sig.size * sig.size;
        let width = sig.idx.len();
        let classes = self.spec.num_classes;
        let mut logits = Vec::with_capacity(n * classes);
        for ni in 0..n {
            let pooled: Vec<f32> = (0..width)
                .map(|j| sig.data[(ni * width + j) * p..(ni * width + j + 1) * p].iter().sum::<f32>() / p as f32)
                .collect();
            for k in 0..classes {
                let row = &self.head_w[k * width..(k + 1) * width];
                logits.push(self.head_b[k] + row.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f32>());
            }
        }
        Ok(logits)
    }

    pub fn predict(&self, images: &[f32], batch: usize) -> Result<Vec<f32>> {
        let per = self.spec.input_channels * self.spec.input_size * self.spec.input_size;
        let mut out = Vec::with_capacity(images.len() / per * self.spec.num_classes);
        for chunk in images.chunks(batch.max(1) * per) {
            out.extend(self.forward(chunk, chunk.len() / per)?);
        }
        Ok(out)
    }

    /// Every convolution unit present in the graph.
    pub fn convs(&self) -> Vec<&PrunedConv> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.extend(b.residual.iter());
            out.extend(b.delta.iter());
        }
        out
    }

    /// Layout ids of blocks that survived.
    pub fn kept_blocks(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.block).collect()
    }
}

/// Costs of a pruned graph next to the naive regular-block implementation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub full_volume: f64,
    pub full_flops: f64,
    pub volume: f64,
    pub flops: f64,
    pub volume_factor: f64,
    pub flop_factor: f64,
    pub regular_block_volume: f64,
    pub regular_block_flops: f64,
}

/// Mixed costs count alive channels only. The regular-block model computes,
/// along each stage's residual chain, every slot alive anywhere in that chain:
/// residual units and last delta units output the stage's final width, and
/// units reading the chain read all of it.
pub fn cost_report(g: &PrunedGraph) -> CostReport {
    let layout = &g.layout;
    let costs = layout.costs();
    let conv_cost = |id: usize, out: usize, inp: usize| {
        let c = &layout.convs[id];
        ((out * c.area()) as f64, (out * inp * c.kernel * c.kernel * c.area()) as f64)
    };
    let (mut volume, mut flops) = (0.0, 0.0);
    for pc in g.convs() {
        let (v, f) = conv_cost(pc.conv, pc.out_idx.len(), pc.in_idx.len());
        volume += v;
        flops += f;
    }

    let (sv, sf) = conv_cost(0, g.stem.out_idx.len(), g.stem.in_idx.len());
    let (mut rv, mut rf) = (sv, sf);
    let mut chain_in = g.stem.out_idx.len();
    for stage in 0..g.spec.stages.len() {
        let members: Vec<&PrunedBlock> = g.blocks.iter().filter(|b| layout.blocks[b.block].stage == stage).collect();
        let width = members.last().map_or(0, |b| b.i_out.len());
        for b in members {
            let reads = if b.residual.is_some() { chain_in } else { width };
            if let Some(r) = &b.residual {
                let (v, f) = conv_cost(r.conv, width, reads);
                rv += v;
                rf += f;
            }
            if let [d1, d2] = &b.delta[..] {
                let (v, f) = conv_cost(d1.conv, d1.out_idx.len(), reads);
                rv += v;
                rf += f;
                let (v, f) = conv_cost(d2.conv, width, d1.out_idx.len());
                rv += v;
                rf += f;
            }
        }
        chain_in = width;
    }
    let full_volume = full_cost(&costs, Metric::Volume);
    let full_flops = full_cost(&costs, Metric::Flops);
    CostReport {
        full_volume,
        full_flops,
        volume,
        flops,
        volume_factor: full_volume / volume,
        flop_factor: full_flops / flops,
        regular_block_volume: rv,
        regular_block_flops: rf,
    }
}
