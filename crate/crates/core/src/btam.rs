//! Bidirectional temporal awareness: a shared multi-scale aggregation block
//! applied to both temporal concatenation orders, channel attention over the
//! pair, and residual refinement together with the absolute difference.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::nn::{BasicBlock, Conv2d};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Parallel 1x1, dilated 3x3 (d=2) and 5x5 branches fused by a 1x1, plus a
/// 1x1 residual path.
#[derive(Clone, Debug)]
pub struct Msa {
    pub branch1: Conv2d,
    pub branch3: Conv2d,
    pub branch5: Conv2d,
    pub fuse: Conv2d,
    pub residual: Conv2d,
}

impl Msa {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, out_channels: usize) -> Self {
        let t = ParamKind::Trainable;
        Self {
            branch1: Conv2d::pointwise(store, init, &format!("{name}.b1"), in_channels, out_channels),
            branch3: Conv2d::new(store, init, &format!("{name}.b3"), in_channels, out_channels, 3, ConvGeometry::new(1, 2, 2), true, t),
            branch5: Conv2d::new(store, init, &format!("{name}.b5"), in_channels, out_channels, 5, ConvGeometry::new(1, 2, 1), true, t),
            fuse: Conv2d::pointwise(store, init, &format!("{name}.fuse"), 3 * out_channels, out_channels),
            residual: Conv2d::pointwise(store, init, &format!("{name}.residual"), in_channels, out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let a = self.branch1.forward(g, x);
        let b = self.branch3.forward(g, x);
        let c = self.branch5.forward(g, x);
        let cat = g.concat_channels(&[a, b, c]);
        let main = self.fuse.forward(g, cat);
        let skip = self.residual.forward(g, x);
        g.add(main, skip)
    }

    /// Zero every branch and the fuse convolution.
    pub fn zero_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for conv in [&self.branch1, &self.branch3, &self.branch5, &self.fuse] {
            conv.set_zero(store);
        }
    }
}

/// `MSA(F1 ++ F2)` and `MSA(F2 ++ F1)`.
#[derive(Clone, Copy, Debug)]
pub struct BidirPair {
    pub forward: Var,
    pub backward: Var,
}

/// Adaptive 1-D kernel length for channel attention over `channels`
/// channels: `t = floor((log2 C + 1) / 2)`, rounded up to odd.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels.max(1) as f64).log2() + 1.0) / 2.0;
    let t = t.floor().max(1.0) as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Global average pool, 1-D conv across channels, sigmoid.
#[derive(Clone, Debug)]
pub struct Eca {
    pub weight: ParamId,
    pub kernel: usize,
}

impl Eca {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize) -> Self {
        let kernel = eca_kernel_size(channels);
        let w = init.uniform(&[kernel], 1.0 / (kernel as f64).sqrt());
        Self { weight: store.add(format!("{name}.weight"), ParamKind::Trainable, w), kernel }
    }

    /// Attention weights `[B, C, 1, 1]`, each in (0, 1).
    pub fn attention<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        g.sigmoid(g.channel_conv1d(pooled, g.param(self.weight)))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let a = self.attention(g, x);
        g.scale_channels(x, a)
    }
}

#[derive(Clone, Debug)]
pub struct Btam {
    pub msa: Msa,
    pub eca: Eca,
    pub reduce: Conv2d,
    pub combine: Conv2d,
    pub blocks: Vec<BasicBlock>,
    pub canonical_order: bool,
}

impl Btam {
    /// `deep_channels` is the width of each fused deep map, `msa_channels`
    /// the width of the output.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, deep_channels: usize, msa_channels: usize, canonical_order: bool) -> Self {
        Self {
            msa: Msa::new(store, init, &format!("{name}.msa"), 2 * deep_channels, msa_channels),
            eca: Eca::new(store, init, &format!("{name}.eca"), 2 * msa_channels),
            reduce: Conv2d::pointwise(store, init, &format!("{name}.reduce"), 2 * msa_channels, msa_channels),
            combine: Conv2d::pointwise(store, init, &format!("{name}.combine"), msa_channels + deep_channels, msa_channels),
            blocks: (0..2).map(|i| BasicBlock::new(store, init, &format!("{name}.res{i}"), msa_channels, msa_channels, 1)).collect(),
            canonical_order,
        }
    }

    pub fn bidirectional<T: Scalar>(&self, g: &Graph<T>, f1: Var, f2: Var) -> Result<BidirPair> {
        check_pair(g, f1, f2)?;
        let forward = self.msa.forward(g, g.concat_channels(&[f1, f2]));
        let backward = self.msa.forward(g, g.concat_channels(&[f2, f1]));
        Ok(BidirPair { forward, backward })
    }

    /// Concatenate the pair (canonically ordered when enabled), apply
    /// channel attention and reduce back to the MSA width.
    pub fn eca_fuse<T: Scalar>(&self, g: &Graph<T>, pair: BidirPair) -> Var {
        let cat = if self.canonical_order {
            g.canonical_concat(pair.forward, pair.backward)
        } else {
            g.concat_channels(&[pair.forward, pair.backward])
        };
        let att = self.eca.forward(g, cat);
        self.reduce.forward(g, att)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, f1: Var, f2: Var) -> Result<Var> {
        let pair = self.bidirectional(g, f1, f2)?;
        let fused = self.eca_fuse(g, pair);
        let diff = g.abs(g.sub(f1, f2));
        let mut x = self.combine.forward(g, g.concat_channels(&[fused, diff]));
        for block in &self.blocks {
            x = block.forward(g, x);
        }
        Ok(x)
    }
}

/// Replacement used when the temporal module is disabled: `conv1x1(|F1 - F2|)`.
#[derive(Clone, Debug)]
pub struct DiffHead {
    pub proj: Conv2d,
}

impl DiffHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, deep_channels: usize, out_channels: usize) -> Self {
        Self { proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), deep_channels, out_channels) }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, f1: Var, f2: Var) -> Result<Var> {
        check_pair(g, f1, f2)?;
        Ok(self.proj.forward(g, g.abs(g.sub(f1, f2))))
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, f1: Var, f2: Var) -> Result<()> {
    let (a, b) = (g.shape(f1), g.shape(f2));
    if a != b {
        return shape_err(format!("temporal features differ in shape: {a:?} vs {b:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn eca_kernel_sizes() {
        // t = floor((log2 C + 1) / 2), bumped to the next odd value.
        assert_eq!(eca_kernel_size(128), 5);
        assert_eq!(eca_kernel_size(512), 5);
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(16), 3);
        assert_eq!(eca_kernel_size(2), 1);
        for c in 1..4096 {
            assert_eq!(eca_kernel_size(c) % 2, 1);
        }
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f32> {
        Init::new(seed).normal(shape, 1.0)
    }

    #[test]
    fn msa_zero_and_identity_configurations() {
        let mut store = ParamStore::<f32>::new();
        let msa = Msa::new(&mut store, &mut Init::new(0), "m", 6, 6);
        msa.zero_branches(&mut store);
        msa.residual.set_zero(&mut store);
        let x = rand_map(&[2, 6, 5, 5], 1);
        {
            let g = Graph::inference(&store);
            let v = g.input(x.clone());
            assert!(g.value(msa.forward(&g, v)).data().iter().all(|&y| y == 0.0));
        }
        msa.residual.set_identity(&mut store);
        let g = Graph::inference(&store);
        let v = g.input(x.clone());
        assert_eq!(*g.value(msa.forward(&g, v)), x);
    }

    #[test]
    fn msa_shape_and_receptive_field() {
        let mut store = ParamStore::<f64>::new();
        let msa = Msa::new(&mut store, &mut Init::new(3), "m", 4, 3);
        let g = Graph::inference(&store);
        let x: Tensor<f64> = rand_map(&[1, 4, 11, 11], 2).cast();
        let mut x2 = x.clone();
        x2.data_mut()[2 * 121 + 5 * 11 + 5] += 1.0;
        let y1 = g.value(msa.forward(&g, g.input(x)));
        let y2 = g.value(msa.forward(&g, g.input(x2)));
        assert_eq!(y1.shape(), &[1, 3, 11, 11]);
        for c in 0..3 {
            for i in 0..11usize {
                for j in 0..11usize {
                    let k = c * 121 + i * 11 + j;
                    if i.abs_diff(5) > 2 || j.abs_diff(5) > 2 {
                        assert_eq!(y1.data()[k], y2.data()[k], "({c},{i},{j})");
                    }
                }
            }
        }
    }

    fn btam(canonical: bool) -> (ParamStore<f32>, Btam) {
        let mut store = ParamStore::new();
        let b = Btam::new(&mut store, &mut Init::new(5), "btam", 8, 6, canonical);
        (store, b)
    }

    #[test]
    fn bidirectional_swap_duality() {
        let (store, m) = btam(true);
        let g = Graph::new(&store, Mode::Eval);
        let a = g.input(rand_map(&[2, 8, 4, 4], 1));
        let b = g.input(rand_map(&[2, 8, 4, 4], 2));
        let p = m.bidirectional(&g, a, b).unwrap();
        let q = m.bidirectional(&g, b, a).unwrap();
        assert_eq!(*g.value(p.forward), *g.value(q.backward));
        assert_eq!(*g.value(p.backward), *g.value(q.forward));
        let s = m.bidirectional(&g, a, a).unwrap();
        assert_eq!(*g.value(s.forward), *g.value(s.backward));
        assert_eq!(g.shape(p.forward), vec![2, 6, 4, 4]);
    }

    #[test]
    fn canonical_btam_is_swap_invariant() {
        let (store, m) = btam(true);
        let g = Graph::new(&store, Mode::Eval);
        let a = g.input(rand_map(&[2, 8, 4, 4], 1));
        let b = g.input(rand_map(&[2, 8, 4, 4], 2));
        let ab = m.forward(&g, a, b).unwrap();
        let ba = m.forward(&g, b, a).unwrap();
        assert_eq!(*g.value(ab), *g.value(ba));
        assert_eq!(g.shape(ab), vec![2, 6, 4, 4]);
    }

    #[test]
    fn eca_attention_in_open_unit_interval() {
        let (store, m) = btam(false);
        let g = Graph::inference(&store);
        let x = g.input(rand_map(&[3, 12, 4, 4], 9).map(|v| v * 3.0));
        let att = g.value(m.eca.attention(&g, x));
        assert!(att.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (store, m) = btam(true);
        let g = Graph::inference(&store);
        let a = g.input(rand_map(&[1, 8, 4, 4], 1));
        let b = g.input(rand_map(&[1, 8, 2, 2], 2));
        assert!(m.forward(&g, a, b).is_err());
    }
}
