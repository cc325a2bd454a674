//! Task decoders: Siamese semantic decoding, change decoding, the Sobel
//! boundary decoder and the semantic-difference refinement of the change
//! logits.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvBnRelu};
use crate::params::{Init, ParamStore};
use crate::tensor::Scalar;

pub const SOBEL_EPS: f64 = 1e-8;
/// Sobel x-derivative, applied as a correlation. The y kernel is its
/// transpose.
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn fixed<T: Scalar>(k: &[f64; 9]) -> Rc<Vec<T>> {
    Rc::new(k.iter().map(|&v| T::of(v)).collect())
}

/// `(gx, gy)` Sobel responses of a single-channel map.
pub fn sobel_gradients<T: Scalar>(g: &Graph<T>, x: Var) -> Result<(Var, Var)> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != 1 {
        return shape_err(format!("sobel expects a single-channel [B, 1, H, W] map, got {shape:?}"));
    }
    Ok((g.filter_fixed(x, fixed(&SOBEL_X), 3), g.filter_fixed(x, fixed(&SOBEL_Y), 3)))
}

/// `sqrt(gx^2 + gy^2 + eps)` with reflect padding.
pub fn sobel_edges<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let (gx, gy) = sobel_gradients(g, x)?;
    let mag2 = g.add(g.square(gx), g.square(gy));
    Ok(g.sqrt(g.add_scalar(mag2, SOBEL_EPS)))
}

/// Semantic decoder shared by both timestamps.
#[derive(Clone, Debug)]
pub struct SemanticDecoder {
    pub refine: [ConvBnRelu; 2],
    pub proj: Conv2d,
    pub width: usize,
}

/// Decoder output for one timestamp.
#[derive(Clone, Copy, Debug)]
pub struct SemanticOutput {
    pub logits: Var,
    /// Pre-projection features at input resolution.
    pub features: Var,
}

impl SemanticDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, shallow: usize, deep: usize, width: usize, classes: usize) -> Self {
        Self {
            refine: [
                ConvBnRelu::same(store, init, &format!("{name}.refine0"), shallow + deep, width),
                ConvBnRelu::same(store, init, &format!("{name}.refine1"), width, width),
            ],
            proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), width, classes),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, shallow: Var, deep: Var, out_hw: (usize, usize)) -> Result<SemanticOutput> {
        let (bs, _, hs, ws) = g.dims4(shallow);
        let (bd, _, hd, wd) = g.dims4(deep);
        if bs != bd || hd * 4 != hs || wd * 4 != ws {
            return shape_err(format!("deep map {hd}x{wd} does not upsample x4 onto shallow map {hs}x{ws}"));
        }
        let up = g.resize(deep, hs, ws);
        let mut x = g.concat_channels(&[shallow, up]);
        for block in &self.refine {
            x = block.forward(g, x);
        }
        let logits = g.resize(self.proj.forward(g, x), out_hw.0, out_hw.1);
        let features = g.resize(x, out_hw.0, out_hw.1);
        Ok(SemanticOutput { logits, features })
    }
}

#[derive(Clone, Debug)]
pub struct ChangeDecoder {
    pub refine: ConvBnRelu,
    pub proj: Conv2d,
}

impl ChangeDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, width: usize) -> Self {
        Self {
            refine: ConvBnRelu::same(store, init, &format!("{name}.refine"), in_channels, width),
            proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), width, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, change: Var, out_hw: (usize, usize)) -> Var {
        let x = self.refine.forward(g, change);
        g.resize(self.proj.forward(g, x), out_hw.0, out_hw.1)
    }
}

/// `proj(x) + sobel(proj(x))`, upsampled.
#[derive(Clone, Debug)]
pub struct BoundaryDecoder {
    pub proj: Conv2d,
}

impl BoundaryDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize) -> Self {
        Self { proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), in_channels, 1) }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, shallow: Var, out_hw: (usize, usize)) -> Result<Var> {
        let p = self.proj.forward(g, shallow);
        let logits = g.add(p, sobel_edges(g, p)?);
        Ok(g.resize(logits, out_hw.0, out_hw.1))
    }
}

/// `change + conv1x1(|s1 - s2|)`.
#[derive(Clone, Debug)]
pub struct TaskInteraction {
    pub proj: Conv2d,
}

impl TaskInteraction {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, feat_channels: usize) -> Self {
        Self { proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), feat_channels, 1) }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, sem1: Var, sem2: Var, change: Var) -> Result<Var> {
        let (s1, s2, c) = (g.shape(sem1), g.shape(sem2), g.shape(change));
        if s1 != s2 || s1[0] != c[0] || s1[2..] != c[2..] || c[1] != 1 {
            return shape_err(format!("task interaction shapes {s1:?}, {s2:?}, {c:?}"));
        }
        let diff = g.abs(g.sub(sem1, sem2));
        Ok(g.add(change, self.proj.forward(g, diff)))
    }
}

/// Network outputs at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub sem1_logits: Var,
    pub sem2_logits: Var,
    /// Change logits after task interaction.
    pub change_logits: Var,
    pub boundary_logits: Var,
    pub sem1_features: Var,
    pub sem2_features: Var,
}
