use crate::budget::{CostInput, LayerCost};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    /// Stride of the stage's first (pooling) block.
    pub stride: usize,
}

/// Residual network of two-conv blocks.
///
/// Every stage opens with a pooling block whose residual path is a strided
/// 1x1 convolution; the remaining blocks have identity residuals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_width: usize,
    pub kernel: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 16,
            stem_width: 16,
            kernel: 3,
            stages: vec![
                StageSpec { blocks: 2, width: 16, stride: 1 },
                StageSpec { blocks: 2, width: 32, stride: 2 },
                StageSpec { blocks: 2, width: 64, stride: 2 },
            ],
            num_classes: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    Stem,
    /// `pos`-th convolution of a block's delta branch.
    Delta { block: usize, pos: usize },
    /// 1x1 residual convolution of a pooling block.
    Residual { block: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayout {
    pub id: usize,
    pub role: ConvRole,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_size: usize,
    pub out_size: usize,
    /// Producers whose alive channels form this convolution's input; `None`
    /// for the image.
    pub producers: Option<Vec<usize>>,
}

impl ConvLayout {
    pub fn area(&self) -> usize {
        self.out_size * self.out_size
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub stage: usize,
    pub delta: [usize; 2],
    /// Present exactly on pooling blocks.
    pub residual: Option<usize>,
    pub width: usize,
}

impl BlockLayout {
    pub fn is_pooling(&self) -> bool {
        self.residual.is_some()
    }
}

/// Flattened convolution and block structure derived from a spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub convs: Vec<ConvLayout>,
    pub blocks: Vec<BlockLayout>,
    pub final_width: usize,
    pub final_size: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.input_channels == 0 || self.stem_width == 0 || self.num_classes == 0 {
            return bad("input channels, stem width and classes must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let mut size = self.input_size;
        if size < self.kernel / 2 + 1 {
            return bad(format!("input size {size} too small"));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.width == 0 {
                return bad(format!("stage {s}: blocks and width must be positive"));
            }
            if st.stride != 1 && st.stride != 2 {
                return bad(format!("stage {s}: stride {} not in {{1, 2}}", st.stride));
            }
            size = (size - 1) / st.stride + 1;
        }
        if size == 0 {
            return bad("spatial size collapses".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let k = self.kernel;
        let pad = k / 2;
        let mut convs = Vec::new();
        let mut blocks = Vec::new();
        let push = |convs: &mut Vec<ConvLayout>, role, cin, cout, kernel, stride, in_size, producers| {
            let p = if kernel == 1 { 0 } else { pad };
            let out_size = (in_size + 2 * p - kernel) / stride + 1;
            let id = convs.len();
            convs.push(ConvLayout { id, role, cin, cout, kernel, stride, pad: p, in_size, out_size, producers });
            id
        };
        let stem = push(&mut convs, ConvRole::Stem, self.input_channels, self.stem_width, k, 1, self.input_size, None);
        let mut signal = vec![stem];
        let mut width = self.stem_width;
        let mut size = self.input_size;
        for (s, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let block = blocks.len();
                let pooling = bi == 0;
                let stride = if pooling { st.stride } else { 1 };
                let c1 = push(
                    &mut convs,
                    ConvRole::Delta { block, pos: 0 },
                    width,
                    st.width,
                    k,
                    stride,
                    size,
                    Some(signal.clone()),
                );
                let mid = convs[c1].out_size;
                let c2 = push(&mut convs, ConvRole::Delta { block, pos: 1 }, st.width, st.width, k, 1, mid, Some(vec![c1]));
                let residual = pooling.then(|| {
                    push(&mut convs, ConvRole::Residual { block }, width, st.width, 1, stride, size, Some(signal.clone()))
                });
                if let Some(r) = residual {
                    debug_assert_eq!(convs[r].out_size, mid);
                    signal = vec![r, c2];
                } else {
                    signal.push(c2);
                }
                width = st.width;
                size = mid;
                blocks.push(BlockLayout { stage: s, delta: [c1, c2], residual, width });
            }
        }
        Ok(Layout { convs, blocks, final_width: width, final_size: size })
    }
}

impl Layout {
    pub fn costs(&self) -> Vec<LayerCost> {
        self.convs
            .iter()
            .map(|c| LayerCost {
                layer_id: c.id,
                area: c.area(),
                out_channels: c.cout,
                in_channels: c.cin,
                kernel: c.kernel,
                stride: c.stride,
                input: match &c.producers {
                    None => CostInput::Image { channels: c.cin },
                    Some(p) => CostInput::Layers(p.clone()),
                },
            })
            .collect()
    }

    pub fn full_volume(&self) -> f64 {
        self.convs.iter().map(|c| (c.cout * c.area()) as f64).sum()
    }

    pub fn pooling_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_pooling()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{full_cost, Metric};

    #[test]
    fn default_layout_structure() {
        let l = NetworkSpec::default().layout().unwrap();
        assert_eq!(l.blocks.len(), 6);
        assert_eq!(l.pooling_blocks(), 3);
        assert_eq!(l.convs.len(), 1 + 6 * 2 + 3);
        assert_eq!((l.final_width, l.final_size), (64, 4));
        // 16*256 + (5 convs * 16*256) + (5 * 32*64) + (5 * 64*16)
        assert_eq!(l.full_volume(), 39936.0);
        assert_eq!(full_cost(&l.costs(), Metric::Volume), 39936.0);
    }

    #[test]
    fn signal_producers_follow_residual_chain() {
        let l = NetworkSpec::default().layout().unwrap();
        let b1 = &l.blocks[1];
        let b0 = &l.blocks[0];
        let r0 = b0.residual.unwrap();
        assert_eq!(l.convs[b1.delta[0]].producers, Some(vec![r0, b0.delta[1]]));
        let b2 = &l.blocks[2];
        assert_eq!(l.convs[b2.residual.unwrap()].producers, Some(vec![r0, b0.delta[1], b1.delta[1]]));
        assert_eq!(l.convs[b2.residual.unwrap()].kernel, 1);
        assert_eq!(l.convs[b2.residual.unwrap()].out_size, 8);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = NetworkSpec { kernel: 2, ..NetworkSpec::default() };
        assert!(matches!(s.layout(), Err(Error::Spec(_))));
        s.kernel = 3;
        s.stages[1].stride = 3;
        assert!(s.validate().is_err());
        s.stages[1].stride = 2;
        s.stages[0].blocks = 0;
        assert!(s.validate().is_err());
    }
}
