//! Binary checkpoint and logits-cache formats (little-endian, CRC32
//! trailer over every preceding byte).

use std::fs;
use std::path::Path;

use crate::autodiff::BnStats;
use crate::distill::LogitsCache;
use crate::error::{Error, Result};
use crate::gates::{GateParams, HcConfig};
use crate::netgraph::{ConvParams, Network, NetworkSpec, PrunedBlock, PrunedConv, PrunedGraph, StageSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BARCKPT1";
pub const CACHE_MAGIC: &[u8; 8] = b"BARLOGT1";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: ArrayData,
}

/// Ordered collection of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn push_f32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) {
        self.push(name.into(), dims, ArrayData::F32(data));
    }

    pub fn push_u32(&mut self, name: impl Into<String>, data: Vec<u32>) {
        let dims = [data.len()];
        self.push(name.into(), &dims, ArrayData::U32(data));
    }

    fn push(&mut self, name: String, dims: &[usize], data: ArrayData) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(self.get(&name).is_none(), "duplicate array {name}");
        self.arrays.push(Array { name, dims: dims.iter().map(|&d| d as u32).collect(), data });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn f32(&self, name: &str) -> Result<&[f32]> {
        match self.get(name).map(|a| &a.data) {
            Some(ArrayData::F32(v)) => Ok(v),
            Some(_) => Err(Error::Argument(format!("array {name} is not f32"))),
            None => Err(Error::Argument(format!("missing array {name}"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<&[u32]> {
        match self.get(name).map(|a| &a.data) {
            Some(ArrayData::U32(v)) => Ok(v),
            Some(_) => Err(Error::Argument(format!("array {name} is not u32"))),
            None => Err(Error::Argument(format!("missing array {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(match a.data {
                ArrayData::F32(_) => 0,
                ArrayData::U32(_) => 1,
            });
            out.push(a.dims.len() as u8);
            for d in &a.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = verify_crc(bytes, CHECKPOINT_MAGIC, path)?;
        let mut r = Reader { buf: body, pos: 8, path };
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::integrity(path, "array name is not UTF-8"))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let n = dims.iter().map(|&d| d as usize).product::<usize>();
            let raw = r.take(n * 4)?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                0 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                1 => ArrayData::U32(words.map(u32::from_le_bytes).collect()),
                d => return Err(Error::integrity(path, format!("unknown dtype {d} for array {name}"))),
            };
            if ck.get(&name).is_some() {
                return Err(Error::integrity(path, format!("duplicate array {name}")));
            }
            ck.arrays.push(Array { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::integrity(path, "trailing bytes after last array"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn verify_crc<'a>(bytes: &'a [u8], magic: &[u8; 8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::integrity(path, "bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::integrity(path, "CRC32 mismatch"));
    }
    Ok(body)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::integrity(self.path, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

// ---- logits cache ---------------------------------------------------------

pub fn cache_to_bytes(c: &LogitsCache) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * c.logits.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(c.n_samples as u32).to_le_bytes());
    out.extend_from_slice(&(c.n_classes as u32).to_le_bytes());
    c.logits.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn cache_from_bytes(bytes: &[u8], path: &Path) -> Result<LogitsCache> {
    let body = verify_crc(bytes, CACHE_MAGIC, path)?;
    let mut r = Reader { buf: body, pos: 8, path };
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let raw = r.take(n * c * 4)?;
    if r.pos != body.len() {
        return Err(Error::integrity(path, "cache size does not match header"));
    }
    let logits = raw.chunks_exact(4).map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect();
    LogitsCache::new(n, c, logits).map_err(|e| Error::integrity(path, e.to_string()))
}

pub fn save_cache(c: &LogitsCache, path: &Path) -> Result<()> {
    fs::write(path, cache_to_bytes(c)).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<LogitsCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    cache_from_bytes(&bytes, path)
}

// ---- networks ---------------------------------------------------------------

pub const KIND_DENSE: u32 = 0;
pub const KIND_PRUNED: u32 = 1;

fn spec_words(s: &NetworkSpec) -> Vec<u32> {
    let mut v = vec![
        s.input_channels as u32,
        s.input_size as u32,
        s.stem_width as u32,
        s.kernel as u32,
        s.num_classes as u32,
        s.stages.len() as u32,
    ];
    for st in &s.stages {
        v.extend([st.blocks as u32, st.width as u32, st.stride as u32]);
    }
    v
}

fn spec_from_words(v: &[u32]) -> Result<NetworkSpec> {
    let bad = || Error::Argument("malformed spec array".into());
    if v.len() < 6 || v.len() != 6 + 3 * v[5] as usize {
        return Err(bad());
    }
    let stages = v[6..]
        .chunks(3)
        .map(|c| StageSpec { blocks: c[0] as usize, width: c[1] as usize, stride: c[2] as usize })
        .collect();
    let spec = NetworkSpec {
        input_channels: v[0] as usize,
        input_size: v[1] as usize,
        stem_width: v[2] as usize,
        kernel: v[3] as usize,
        num_classes: v[4] as usize,
        stages,
    };
    spec.validate()?;
    Ok(spec)
}

/// A checkpoint's payload: a dense network or a pruned graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Dense(Box<Network>),
    Pruned(Box<PrunedGraph>),
}

pub fn network_to_checkpoint(net: &Network) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push_u32("kind", vec![KIND_DENSE]);
    ck.push_u32("spec", spec_words(&net.spec));
    for (i, c) in net.convs.iter().enumerate() {
        ck.push_f32(format!("conv{i}.weight"), c.weight.shape(), c.weight.data().to_vec());
        ck.push_f32(format!("conv{i}.gamma"), &[c.gamma.len()], c.gamma.clone());
        ck.push_f32(format!("conv{i}.beta"), &[c.beta.len()], c.beta.clone());
        ck.push_f32(format!("conv{i}.running_mean"), &[c.gamma.len()], net.bn[i].mean.clone());
        ck.push_f32(format!("conv{i}.running_var"), &[c.gamma.len()], net.bn[i].var.clone());
        ck.push_f32(format!("conv{i}.log_alpha"), &[c.gamma.len()], net.gates[i].log_alpha.clone());
    }
    ck.push_f32("head.weight", net.head_w.shape(), net.head_w.data().to_vec());
    ck.push_f32("head.bias", &[net.head_b.len()], net.head_b.clone());
    ck
}

fn f32_exact(ck: &Checkpoint, name: &str, len: usize) -> Result<Vec<f32>> {
    let v = ck.f32(name)?;
    if v.len() != len {
        return Err(Error::Argument(format!("array {name}: expected {len} values, got {}", v.len())));
    }
    Ok(v.to_vec())
}

pub fn network_from_checkpoint(ck: &Checkpoint) -> Result<Network> {
    let spec = spec_from_words(ck.u32("spec")?)?;
    let layout = spec.layout()?;
    let mut convs = Vec::new();
    let mut bn = Vec::new();
    let mut gates = Vec::new();
    for c in &layout.convs {
        let i = c.id;
        let shape = c.weight_shape();
        let weight = Tensor::new(shape.to_vec(), f32_exact(ck, &format!("conv{i}.weight"), shape.iter().product())?)?;
        convs.push(ConvParams {
            weight,
            gamma: f32_exact(ck, &format!("conv{i}.gamma"), c.cout)?,
            beta: f32_exact(ck, &format!("conv{i}.beta"), c.cout)?,
        });
        bn.push(BnStats {
            mean: f32_exact(ck, &format!("conv{i}.running_mean"), c.cout)?,
            var: f32_exact(ck, &format!("conv{i}.running_var"), c.cout)?,
        });
        gates.push(GateParams {
            log_alpha: f32_exact(ck, &format!("conv{i}.log_alpha"), c.cout)?,
            hc: HcConfig::default(),
            clamp_protect: matches!(c.role, crate::netgraph::ConvRole::Residual { .. }),
        });
    }
    let hw = [spec.num_classes, layout.final_width];
    let head_w = Tensor::new(hw.to_vec(), f32_exact(ck, "head.weight", hw[0] * hw[1])?)?;
    let head_b = f32_exact(ck, "head.bias", spec.num_classes)?;
    Ok(Network { spec, layout, convs, bn, head_w, head_b, gates })
}

fn push_pruned_conv(ck: &mut Checkpoint, prefix: &str, pc: &PrunedConv, k: usize) {
    ck.push_u32(format!("{prefix}.conv"), vec![pc.conv as u32]);
    ck.push_u32(format!("{prefix}.in_idx"), pc.in_idx.clone());
    ck.push_u32(format!("{prefix}.out_idx"), pc.out_idx.clone());
    ck.push_f32(format!("{prefix}.weight"), &[pc.out_idx.len(), pc.in_idx.len(), k, k], pc.weight.clone());
    ck.push_f32(format!("{prefix}.bias"), &[pc.bias.len()], pc.bias.clone());
}

fn read_pruned_conv(ck: &Checkpoint, prefix: &str, layout: &crate::netgraph::Layout) -> Result<PrunedConv> {
    let conv = *ck.u32(&format!("{prefix}.conv"))?.first().ok_or_else(|| Error::Argument("empty conv id".into()))? as usize;
    let c = layout.convs.get(conv).ok_or_else(|| Error::Graph(format!("{prefix}: conv {conv} out of range")))?;
    let in_idx = ck.u32(&format!("{prefix}.in_idx"))?.to_vec();
    let out_idx = ck.u32(&format!("{prefix}.out_idx"))?.to_vec();
    for (what, idx, bound) in [("in_idx", &in_idx, c.cin), ("out_idx", &out_idx, c.cout)] {
        if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i as usize >= bound) {
            return Err(Error::Graph(format!("{prefix}.{what} not sorted, unique and in range")));
        }
    }
    let weight = f32_exact(ck, &format!("{prefix}.weight"), out_idx.len() * in_idx.len() * c.kernel * c.kernel)?;
    let bias = f32_exact(ck, &format!("{prefix}.bias"), out_idx.len())?;
    Ok(PrunedConv { conv, in_idx, out_idx, weight, bias })
}

pub fn pruned_to_checkpoint(g: &PrunedGraph) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push_u32("kind", vec![KIND_PRUNED]);
    ck.push_u32("spec", spec_words(&g.spec));
    let kernel_of = |pc: &PrunedConv| g.layout.convs[pc.conv].kernel;
    push_pruned_conv(&mut ck, "stem", &g.stem, kernel_of(&g.stem));
    ck.push_u32("blocks", g.blocks.iter().map(|b| b.block as u32).collect());
    for b in &g.blocks {
        let p = format!("block{}", b.block);
        ck.push_u32(format!("{p}.i_in"), b.i_in.clone());
        ck.push_u32(format!("{p}.i_res"), b.i_res.clone());
        ck.push_u32(format!("{p}.i_delta"), b.i_delta.clone());
        ck.push_u32(format!("{p}.i_out"), b.i_out.clone());
        ck.push_u32(format!("{p}.n_res"), vec![b.n_res as u32]);
        if let Some(r) = &b.residual {
            push_pruned_conv(&mut ck, &format!("{p}.res"), r, kernel_of(r));
        }
        for (j, d) in b.delta.iter().enumerate() {
            push_pruned_conv(&mut ck, &format!("{p}.delta{j}"), d, kernel_of(d));
        }
    }
    ck.push_u32("final_idx", g.final_idx.clone());
    ck.push_f32("head.weight", &[g.spec.num_classes, g.final_idx.len()], g.head_w.clone());
    ck.push_f32("head.bias", &[g.head_b.len()], g.head_b.clone());
    ck
}

pub fn pruned_from_checkpoint(ck: &Checkpoint) -> Result<PrunedGraph> {
    let spec = spec_from_words(ck.u32("spec")?)?;
    let layout = spec.layout()?;
    let stem = read_pruned_conv(ck, "stem", &layout)?;
    let mut blocks = Vec::new();
    for &bi in ck.u32("blocks")? {
        let p = format!("block{bi}");
        let bl = layout.blocks.get(bi as usize).ok_or_else(|| Error::Graph(format!("block {bi} out of range")))?;
        let residual = if bl.is_pooling() { Some(read_pruned_conv(ck, &format!("{p}.res"), &layout)?) } else { None };
        let delta = if ck.get(&format!("{p}.delta0.conv")).is_some() {
            vec![read_pruned_conv(ck, &format!("{p}.delta0"), &layout)?, read_pruned_conv(ck, &format!("{p}.delta1"), &layout)?]
        } else {
            Vec::new()
        };
        blocks.push(PrunedBlock {
            block: bi as usize,
            i_in: ck.u32(&format!("{p}.i_in"))?.to_vec(),
            residual,
            delta,
            i_res: ck.u32(&format!("{p}.i_res"))?.to_vec(),
            i_delta: ck.u32(&format!("{p}.i_delta"))?.to_vec(),
            n_res: *ck.u32(&format!("{p}.n_res"))?.first().unwrap_or(&0) as usize,
            i_out: ck.u32(&format!("{p}.i_out"))?.to_vec(),
        });
    }
    let final_idx = ck.u32("final_idx")?.to_vec();
    let head_w = f32_exact(ck, "head.weight", spec.num_classes * final_idx.len())?;
    let head_b = f32_exact(ck, "head.bias", spec.num_classes)?;
    Ok(PrunedGraph { spec, layout, stem, blocks, head_w, head_b, final_idx })
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    match ck.u32("kind")?.first() {
        Some(&KIND_DENSE) => Ok(Model::Dense(Box::new(network_from_checkpoint(ck)?))),
        Some(&KIND_PRUNED) => Ok(Model::Pruned(Box::new(pruned_from_checkpoint(ck)?))),
        k => Err(Error::Argument(format!("unknown checkpoint kind {k:?}"))),
    }
}

/// Loads a checkpoint file; structural problems are reported as integrity
/// errors naming the file.
pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(&ck).map_err(|e| match e {
        Error::Integrity { .. } => e,
        other => Error::integrity(path, other.to_string()),
    })
}
