//! Gated fusion of the two encoder branches and the Gaussian-smoothed
//! projection applied to the prior branch's shallow features.

use std::rc::Rc;

use crate::error::{shape_err, Result, ScdError};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Smoothing strengths of the three sequential blocks, coarse to fine.
pub const GSPM_SIGMAS: [f64; 3] = [1.0, 0.8, 0.6];
pub const GAUSSIAN_SIZE: usize = 3;

/// Normalized isotropic Gaussian on an odd `size x size` integer grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub size: usize,
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ScdError::InvalidArgument(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if size % 2 == 0 {
        return Err(ScdError::InvalidArgument(format!("gaussian kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|i| {
            let di = (i / size) as f64 - r;
            let dj = (i % size) as f64 - r;
            (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel { sigma, size, weights })
}

/// Gaussian convolution block: fixed depthwise Gaussian, learnable 1x1,
/// batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Gcb {
    kernel: GaussianKernel,
    pub pointwise: Conv2d,
    bn: BatchNorm2d,
}

impl Gcb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            kernel: gaussian_kernel(sigma, GAUSSIAN_SIZE)?,
            pointwise: Conv2d::pointwise(store, init, &format!("{name}.pw"), channels, channels),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
        })
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    /// The fixed depthwise stage alone.
    pub fn smooth<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let k: Vec<T> = self.kernel.weights.iter().map(|&w| T::of(w)).collect();
        g.filter_fixed(x, Rc::new(k), self.kernel.size)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let y = self.smooth(g, x);
        let y = self.pointwise.forward(g, y);
        let y = self.bn.forward(g, y);
        g.relu(y)
    }
}

/// `proj(GCB_0.6(GCB_0.8(GCB_1.0(x)))) + residual(x)` with two independent
/// 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct Gspm {
    pub blocks: Vec<Gcb>,
    pub proj: Conv2d,
    pub residual: Conv2d,
}

impl Gspm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let blocks = GSPM_SIGMAS
            .iter()
            .enumerate()
            .map(|(i, &s)| Gcb::new(store, init, &format!("{name}.gcb{i}"), channels, s))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), channels, channels),
            residual: Conv2d::pointwise(store, init, &format!("{name}.residual"), channels, channels),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(g, y);
        }
        let main = self.proj.forward(g, y);
        let skip = self.residual.forward(g, x);
        g.add(main, skip)
    }

    /// Every learnable entry of the module (block pointwise convs, batch
    /// norm affine terms, both projections).
    pub fn trainable_ids<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str) -> Vec<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with(prefix) && store.kind(id) == ParamKind::Trainable).collect()
    }
}

/// `(1 - gamma) * f_res + gamma * f_other`.
pub fn gate_fuse<T: Scalar>(g: &Graph<T>, f_res: Var, f_other: Var, gamma: Var) -> Result<Var> {
    let (a, b) = (g.shape(f_res), g.shape(f_other));
    if a != b {
        return shape_err(format!("gate_fuse: {a:?} vs {b:?}"));
    }
    let gv = g.value(gamma);
    if gv.len() != 1 {
        return shape_err("gate_fuse: gamma must be a scalar");
    }
    let gm = gv.data()[0].as_f64();
    if !(0.0..=1.0).contains(&gm) {
        return Err(ScdError::InvalidArgument(format!("gate value {gm} outside [0, 1]")));
    }
    Ok(g.mix(f_res, f_other, gamma))
}

/// Shallow gate `alpha` (fixed) and deep gate `sigmoid(beta_raw)`
/// (learnable).
#[derive(Clone, Debug)]
pub struct GateParams {
    pub alpha: f64,
    pub beta_raw: ParamId,
}

impl GateParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ScdError::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let beta_raw = store.add(format!("{name}.beta_raw"), ParamKind::Trainable, Tensor::zeros(&[1]));
        Ok(Self { alpha, beta_raw })
    }

    pub fn beta<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        let raw = store.get(self.beta_raw).data()[0].as_f64();
        1.0 / (1.0 + (-raw).exp())
    }
}

/// Fused shallow and deep features of one timestamp.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub shallow: Var,
    pub deep: Var,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub gates: Option<GateParams>,
    pub gspm: Option<Gspm>,
}

impl Fusion {
    /// Gate values `(alpha, beta)` actually applied; both zero without the
    /// prior branch.
    pub fn effective_gates<T: Scalar>(&self, store: &ParamStore<T>) -> (f64, f64) {
        match &self.gates {
            Some(gp) => (gp.alpha, gp.beta(store)),
            None => (0.0, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, feats: &crate::encoder::EncoderFeatures) -> Result<FusedFeatures> {
        let Some(gates) = &self.gates else {
            // Without the prior branch both gates are zero and the local
            // features pass through unchanged.
            return Ok(FusedFeatures { shallow: feats.res_shallow, deep: feats.res_deep });
        };
        let (Some(sam_shallow), Some(sam_deep)) = (feats.sam_shallow, feats.sam_deep) else {
            return Err(ScdError::InvalidArgument("gated fusion needs prior-branch features".into()));
        };
        let refined = match &self.gspm {
            Some(gspm) => gspm.forward(g, sam_shallow),
            None => sam_shallow,
        };
        let alpha = g.input(Tensor::scalar(T::of(gates.alpha)));
        let shallow = gate_fuse(g, feats.res_shallow, refined, alpha)?;
        let beta = g.sigmoid(g.param(gates.beta_raw));
        let deep = gate_fuse(g, feats.res_deep, sam_deep, beta)?;
        Ok(FusedFeatures { shallow, deep })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use proptest::prelude::*;

    #[test]
    fn kernel_values_match_scalar_oracle() {
        // Frozen from evaluating exp(-(di^2 + dj^2) / 2s^2) on the 3x3 grid
        // and normalizing, in an independent script.
        let k = gaussian_kernel(1.0, 3).unwrap();
        assert!((k.at(1, 1) - 0.2042).abs() < 1e-4);
        assert!((k.at(0, 1) - 0.1238).abs() < 1e-4);
        assert!((k.at(0, 0) - 0.0751).abs() < 1e-4);
        let k = gaussian_kernel(0.6, 3).unwrap();
        assert!((k.at(1, 1) - 0.4452).abs() < 1e-4);
        assert!((k.at(0, 1) - 0.1110).abs() < 1e-4);
        assert!((k.at(0, 0) - 0.0277).abs() < 1e-4);
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(1.0, 1).is_ok());
    }

    proptest! {
        #[test]
        fn kernel_is_normalized_positive_and_symmetric(sigma in 0.3f64..5.0, half in 0usize..4) {
            let size = 2 * half + 1;
            let k = gaussian_kernel(sigma, size).unwrap();
            prop_assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(k.weights.iter().all(|&w| w > 0.0));
            for i in 0..size {
                for j in 0..size {
                    let w = k.at(i, j);
                    prop_assert_eq!(w, k.at(size - 1 - i, j));
                    prop_assert_eq!(w, k.at(i, size - 1 - j));
                    prop_assert!((w - k.at(j, i)).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn gate_output_lies_between_inputs(a in prop::collection::vec(-10f32..10.0, 8), b in prop::collection::vec(-10f32..10.0, 8), gamma in 0f32..=1.0) {
            let store = ParamStore::new();
            let g = Graph::inference(&store);
            let fa = g.input(Tensor::new(&[1, 2, 2, 2], a.clone()).unwrap());
            let fb = g.input(Tensor::new(&[1, 2, 2, 2], b.clone()).unwrap());
            let gm = g.input(Tensor::scalar(gamma));
            let y = gate_fuse(&g, fa, fb, gm).unwrap();
            for (i, &v) in g.value(y).data().iter().enumerate() {
                let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
                let slack = 1e-5 * (1.0 + hi.abs().max(lo.abs()));
                prop_assert!(v >= lo - slack && v <= hi + slack);
            }
        }
    }

    #[test]
    fn gate_degenerate_cases_are_exact() {
        let store = ParamStore::new();
        let g = Graph::inference(&store);
        let a: Tensor<f32> = Init::new(1).normal(&[2, 3, 4, 4], 1.0);
        let b: Tensor<f32> = Init::new(2).normal(&[2, 3, 4, 4], 1.0);
        let (fa, fb) = (g.input(a.clone()), g.input(b.clone()));
        let zero = g.input(Tensor::scalar(0.0));
        let one = g.input(Tensor::scalar(1.0));
        assert_eq!(*g.value(gate_fuse(&g, fa, fb, zero).unwrap()), a);
        assert_eq!(*g.value(gate_fuse(&g, fa, fb, one).unwrap()), b);
        let two = g.input(Tensor::full(&[1, 1, 2, 2], 2.0));
        let four = g.input(Tensor::full(&[1, 1, 2, 2], 4.0));
        let half = g.input(Tensor::scalar(0.5));
        assert!(g.value(gate_fuse(&g, two, four, half).unwrap()).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn gate_rejects_bad_gamma_and_shapes() {
        let store = ParamStore::new();
        let g = Graph::<f32>::inference(&store);
        let a = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 1, 2, 3]));
        let ok = g.input(Tensor::scalar(0.5));
        let bad = g.input(Tensor::scalar(1.5));
        assert!(matches!(gate_fuse(&g, a, b, ok), Err(ScdError::Shape(_))));
        assert!(matches!(gate_fuse(&g, a, a, bad), Err(ScdError::InvalidArgument(_))));
    }

    fn gspm(channels: usize) -> (ParamStore<f32>, Gspm) {
        let mut store = ParamStore::new();
        let m = Gspm::new(&mut store, &mut Init::new(4), "gspm", channels).unwrap();
        (store, m)
    }

    #[test]
    fn gspm_zero_weights_give_zero_output() {
        let (mut store, m) = gspm(4);
        for id in store.ids().collect::<Vec<_>>() {
            if store.kind(id) == ParamKind::Trainable {
                let t = store.get_mut(id);
                *t = Tensor::zeros(t.shape());
            }
        }
        let g = Graph::new(&store, Mode::Train);
        let x = g.input(Init::new(9).normal(&[2, 4, 8, 8], 1.0));
        assert!(g.value(m.forward(&g, x)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gspm_residual_identity_returns_input() {
        let (mut store, m) = gspm(4);
        m.residual.set_identity(&mut store);
        m.proj.set_zero(&mut store);
        let x: Tensor<f32> = Init::new(9).normal(&[2, 4, 8, 8], 1.0);
        let g = Graph::new(&store, Mode::Train);
        let v = g.input(x.clone());
        assert_eq!(*g.value(m.forward(&g, v)), x);
    }

    #[test]
    fn gspm_preserves_shape() {
        let (store, m) = gspm(64);
        let g = Graph::new(&store, Mode::Train);
        let x = g.input(Init::new(9).normal(&[2, 64, 16, 16], 1.0));
        assert_eq!(g.shape(m.forward(&g, x)), vec![2, 64, 16, 16]);
    }

    #[test]
    fn smoothing_fixes_constants_and_reduces_noise_variance() {
        let (store, m) = gspm(3);
        let store64 = store.cast::<f64>();
        let g = Graph::inference(&store64);
        let c = g.input(Tensor::from_fn(&[1, 3, 8, 8], |i| (i / 64) as f64 + 0.25));
        let y = m.blocks[0].smooth(&g, c);
        for (v, w) in g.value(y).data().iter().zip(g.value(c).data()) {
            assert!((v - w).abs() < 1e-12);
        }
        for seed in 0..10 {
            let x: Tensor<f64> = Init::new(100 + seed).normal(&[1, 1, 32, 32], 1.0);
            let var = |t: &Tensor<f64>| {
                let m = t.sum() / t.len() as f64;
                t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64
            };
            let v_in = var(&x);
            let xv = g.input(x);
            let v_out = var(&g.value(m.blocks[0].smooth(&g, xv)));
            assert!(v_out < v_in, "seed {seed}: {v_out} >= {v_in}");
        }
    }
}
