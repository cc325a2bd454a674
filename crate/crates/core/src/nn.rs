//! Parameterized layers shared by the encoder, fusion, temporal and head
//! modules.

use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        kind: ParamKind,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init.he_normal(&[out_channels, in_channels, kernel, kernel], fan_in);
        let weight = store.add(format!("{name}.weight"), kind, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), kind, Tensor::zeros(&[out_channels])));
        Self { weight, bias, geom, in_channels, out_channels, kernel }
    }

    /// Same-size `k x k` convolution (odd `k`, stride 1) with a bias.
    pub fn same<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(store, init, name, in_channels, out_channels, kernel, ConvGeometry::new(1, kernel / 2, 1), true, ParamKind::Trainable)
    }

    /// 1x1 projection with bias.
    pub fn pointwise<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self::same(store, init, name, in_channels, out_channels, 1)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }

    /// Overwrite the weights with an identity map (requires equal channel
    /// counts and a 1x1 kernel) and zero the bias.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.in_channels, self.out_channels);
        assert_eq!(self.kernel, 1);
        let c = self.in_channels;
        *store.get_mut(self.weight) = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { T::one() } else { T::zero() });
        if let Some(b) = self.bias {
            *store.get_mut(b) = Tensor::zeros(&[c]);
        }
    }

    pub fn set_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.weight);
        *w = Tensor::zeros(w.shape());
        if let Some(b) = self.bias {
            let b = store.get_mut(b);
            *b = Tensor::zeros(b.shape());
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, self.running_mean, self.running_var)
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
    ) -> Self {
        let conv = Conv2d::new(store, init, &format!("{name}.conv"), in_channels, out_channels, kernel, geom, false, ParamKind::Trainable);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        Self { conv, bn }
    }

    pub fn same<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self::new(store, init, name, in_channels, out_channels, 3, ConvGeometry::new(1, 1, 1))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        g.relu(y)
    }
}

/// Two 3x3 conv-BN stages with an identity (or projected) shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), in_channels, out_channels, 3, ConvGeometry::new(stride, 1, 1), false, ParamKind::Trainable);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_channels);
        let conv2 = Conv2d::new(store, init, &format!("{name}.conv2"), out_channels, out_channels, 3, ConvGeometry::new(1, 1, 1), false, ParamKind::Trainable);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_channels);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(store, init, &format!("{name}.down"), in_channels, out_channels, 1, ConvGeometry::new(stride, 0, 1), false, ParamKind::Trainable),
                BatchNorm2d::new(store, &format!("{name}.down_bn"), out_channels),
            )
        });
        Self { conv1, bn1, conv2, bn2, shortcut }
    }

    /// Second convolution of the residual path.
    pub fn output_conv(&self) -> &Conv2d {
        &self.conv2
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Var {
        let y = g.relu(self.bn1.forward(g, self.conv1.forward(g, x)));
        let y = self.bn2.forward(g, self.conv2.forward(g, y));
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(g, conv.forward(g, x)),
            None => x,
        };
        g.relu(g.add(y, skip))
    }
}
