//! Dual-branch Siamese encoder.
//!
//! The local branch is a reduced residual CNN trained end to end. The prior
//! branch stands in for a large pretrained encoder: a seeded, frozen
//! convolutional stack exposing the same two taps (stride-4 shallow,
//! stride-16 deep). Both branches are applied to each timestamp with the same
//! parameters.

use std::path::Path;

use crate::error::{shape_err, Result, ScdError};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::nn::{BasicBlock, Conv2d, ConvBnRelu};
use crate::params::{Init, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Name prefix of every prior-branch parameter.
pub const PRIOR_PREFIX: &str = "encoder.prior.";
pub const LOCAL_PREFIX: &str = "encoder.local.";

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub frozen: bool,
    pub channels_shallow: usize,
    pub channels_deep: usize,
    pub seed: u64,
}

/// Per-timestamp encoder outputs. The prior taps are absent when the prior
/// branch is disabled.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub res_shallow: Var,
    pub res_deep: Var,
    pub sam_shallow: Option<Var>,
    pub sam_deep: Option<Var>,
}

fn check_image<T: Scalar>(g: &Graph<T>, image: Var) -> Result<()> {
    let shape = g.shape(image);
    if shape.len() != 4 || shape[1] != 3 {
        return shape_err(format!("encoder expects [B, 3, H, W] images, got {shape:?}"));
    }
    if shape[0] == 0 || shape[2] == 0 || shape[3] == 0 || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
        return shape_err(format!("image height and width must be positive multiples of 16, got {}x{}", shape[2], shape[3]));
    }
    Ok(())
}

/// Residual CNN: 7x7/2 stem, 3x3/2 max pool, then four stages of basic
/// blocks. Stage 1 (stride 4) is the shallow tap, stage 4 (stride 16) the
/// deep tap.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    stem: ConvBnRelu,
    stages: Vec<Vec<BasicBlock>>,
    channels_shallow: usize,
    channels_deep: usize,
}

impl LocalBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, channels_shallow: usize, channels_deep: usize, depths: [usize; 4]) -> Self {
        let name = |s: &str| format!("{LOCAL_PREFIX}{s}");
        let stem = ConvBnRelu::new(store, init, &name("stem"), 3, channels_shallow, 7, ConvGeometry::new(2, 3, 1));
        let mid = (2 * channels_shallow).min(channels_deep).max(1);
        let widths = [channels_shallow, mid, channels_deep, channels_deep];
        let strides = [1, 2, 2, 1];
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = channels_shallow;
        for (s, ((&width, &stride), &depth)) in widths.iter().zip(&strides).zip(&depths).enumerate() {
            let depth = depth.max(1);
            let blocks = (0..depth)
                .map(|i| {
                    let block = BasicBlock::new(store, init, &name(&format!("stage{}.{}", s + 1, i)), in_ch, width, if i == 0 { stride } else { 1 });
                    in_ch = width;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Self { stem, stages, channels_shallow, channels_deep }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, image: Var) -> Result<(Var, Var)> {
        check_image(g, image)?;
        let x = self.stem.forward(g, image);
        let mut x = g.max_pool(x, 3, ConvGeometry::new(2, 1, 1));
        let mut shallow = x;
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, x);
            }
            if s == 0 {
                shallow = x;
            }
        }
        Ok((shallow, x))
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.channels_shallow, self.channels_deep)
    }

    /// The last convolution of the deep stage.
    pub fn last_block(&self) -> &BasicBlock {
        self.stages.last().and_then(|s| s.last()).expect("non-empty stages")
    }
}

/// Frozen convolutional stand-in for a pretrained global encoder: a 4x4/4
/// patch embedding (shallow tap), two 2x2/2 merges and a 1x1 neck (deep
/// tap). Weights come from the branch seed or an external weights file and
/// are never optimized.
#[derive(Clone, Debug)]
pub struct PriorBranch {
    patch: Conv2d,
    merge1: Conv2d,
    merge2: Conv2d,
    neck: Conv2d,
    spec: BranchSpec,
}

impl PriorBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: &BranchSpec) -> Self {
        let mut init = Init::new(spec.seed);
        let kind = if spec.frozen { ParamKind::Frozen } else { ParamKind::Trainable };
        let (cs, cd) = (spec.channels_shallow, spec.channels_deep);
        let mid = (2 * cs).min(cd).max(1);
        let name = |s: &str| format!("{PRIOR_PREFIX}{s}");
        let patch = Conv2d::new(store, &mut init, &name("patch"), 3, cs, 4, ConvGeometry::new(4, 0, 1), true, kind);
        let merge1 = Conv2d::new(store, &mut init, &name("merge1"), cs, mid, 2, ConvGeometry::new(2, 0, 1), true, kind);
        let merge2 = Conv2d::new(store, &mut init, &name("merge2"), mid, cd, 2, ConvGeometry::new(2, 0, 1), true, kind);
        let neck = Conv2d::new(store, &mut init, &name("neck"), cd, cd, 1, ConvGeometry::new(1, 0, 1), true, kind);
        Self { patch, merge1, merge2, neck, spec: spec.clone() }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, image: Var) -> Result<(Var, Var)> {
        check_image(g, image)?;
        let shallow = g.relu(self.patch.forward(g, image));
        let x = g.relu(self.merge1.forward(g, shallow));
        let x = g.relu(self.merge2.forward(g, x));
        let deep = self.neck.forward(g, x);
        Ok((shallow, deep))
    }

    pub fn spec(&self) -> &BranchSpec {
        &self.spec
    }

    /// Replace the seeded weights with arrays from a tensor archive. Every
    /// prior-branch parameter must be present with a matching shape; names
    /// may be given with or without the `encoder.prior.` prefix.
    pub fn load_weights(&self, store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
        let archive = crate::checkpoint::read_archive(path)?;
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(PRIOR_PREFIX)).collect();
        for id in ids {
            let full = store.name(id).to_string();
            let short = &full[PRIOR_PREFIX.len()..];
            let array = archive
                .arrays
                .iter()
                .find(|a| a.name == full || a.name == short)
                .ok_or_else(|| ScdError::Checkpoint(format!("prior weights file lacks `{full}`")))?;
            if array.shape != store.get(id).shape() {
                return Err(ScdError::Checkpoint(format!(
                    "prior weight `{full}` has shape {:?}, expected {:?}",
                    array.shape,
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = Tensor::new(&array.shape, array.data.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub local: LocalBranch,
    pub prior: Option<PriorBranch>,
}

impl Encoder {
    pub fn encode<T: Scalar>(&self, g: &Graph<T>, image: Var) -> Result<EncoderFeatures> {
        let (res_shallow, res_deep) = self.local.forward(g, image)?;
        let (sam_shallow, sam_deep) = match &self.prior {
            Some(prior) => {
                let (s, d) = prior.forward(g, image)?;
                (Some(s), Some(d))
            }
            None => (None, None),
        };
        Ok(EncoderFeatures { res_shallow, res_deep, sam_shallow, sam_deep })
    }

    /// Encode both timestamps with one parameter set.
    pub fn siamese_encode<T: Scalar>(&self, g: &Graph<T>, image_t1: Var, image_t2: Var) -> Result<(EncoderFeatures, EncoderFeatures)> {
        let (s1, s2) = (g.shape(image_t1), g.shape(image_t2));
        if s1 != s2 {
            return shape_err(format!("bi-temporal images differ in shape: {s1:?} vs {s2:?}"));
        }
        Ok((self.encode(g, image_t1)?, self.encode(g, image_t2)?))
    }
}
