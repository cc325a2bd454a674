//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to its [`Var`]s. Parameters are looked up once per graph, so a weight used
//! for both timestamps (or both temporal orders) is a single leaf whose
//! gradient accumulates from every use.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    mode: Mode,
    record: bool,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&i| self.grads[i].as_ref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Recording graph; gradients are available after [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self::with_recording(params, mode, true)
    }

    /// Eval-mode graph that keeps no backward closures.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_recording(params, Mode::Eval, false)
    }

    pub fn with_recording(params: &'p ParamStore<T>, mode: Mode, record: bool) -> Self {
        Self {
            params,
            mode,
            record,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn dims4(&self, v: Var) -> (usize, usize, usize, usize) {
        self.nodes.borrow()[v.0].value.dims4()
    }

    /// Batch-norm running statistics computed during a train-mode forward.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    fn latest_buffer(&self, id: ParamId) -> Tensor<T> {
        self.buffer_updates
            .borrow()
            .iter()
            .rev()
            .find(|(i, _)| *i == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.params.get(id).clone())
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.record,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Input leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// The graph's leaf for a stored parameter. Only trainable entries
    /// require gradients.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let trainable = self.params.kind(id) == ParamKind::Trainable;
        let v = self.push_leaf(self.params.get(id).clone(), trainable, Some(id));
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    fn push(&self, value: Tensor<T>, parents: &[Var], backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires = self.record && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires { Some(Box::new(backward)) } else { None },
            requires_grad: requires,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), T::one()));
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            // Interior gradients are released once propagated; leaves keep theirs.
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = bw(&g, &need);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((&p, pg), &n) in node.parents.iter().zip(pgrads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !n {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let params = nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|id| (id, i))).collect();
        Gradients { grads, params }
    }

    // ---------------------------------------------------------------- conv

    /// 2-D convolution with zero padding. `w` is `[out, in, kh, kw]`, `bias`
    /// is `[out]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, cin, h, wd) = xv.dims4();
        let (cout, wcin, kh, kw) = wv.dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        let oh = geom.out_size(h, kh).expect("conv2d: kernel larger than padded input");
        let ow = geom.out_size(wd, kw).expect("conv2d: kernel larger than padded input");
        let dims = ConvDims { batch: b, in_channels: cin, height: h, width: wd, kh, kw, out_h: oh, out_w: ow };
        let (rows, ncols) = (dims.rows(), dims.cols());
        let mut cols = vec![T::zero(); rows * ncols];
        kernels::im2col(xv.data(), &dims, geom, &mut cols);
        let mut ymat = vec![T::zero(); cout * ncols];
        T::gemm(cout, rows, ncols, T::one(), wv.data(), rows as isize, 1, &cols, ncols as isize, 1, T::zero(), &mut ymat, ncols as isize, 1);
        drop(cols);
        let ohw = oh * ow;
        let mut y = vec![T::zero(); b * cout * ohw];
        kernels::cmajor_to_bmajor(&ymat, b, cout, ohw, &mut y);
        if let Some(bias) = bias {
            let bv = self.value(bias);
            assert_eq!(bv.len(), cout, "conv2d: bias length");
            for bi in 0..b {
                for co in 0..cout {
                    let bc = bv.data()[co];
                    for v in &mut y[(bi * cout + co) * ohw..][..ohw] {
                        *v += bc;
                    }
                }
            }
        }
        let out = Tensor::new(&[b, cout, oh, ow], y).expect("conv2d output");
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push(out, &parents, move |dy, need| {
            let mut dymat = vec![T::zero(); cout * ncols];
            kernels::bmajor_to_cmajor(dy.data(), b, cout, ohw, &mut dymat);
            let mut cols = vec![T::zero(); rows * ncols];
            let mut dx = None;
            let mut dw = None;
            if need[1] {
                kernels::im2col(xv.data(), &dims, geom, &mut cols);
                let mut g = vec![T::zero(); cout * rows];
                // dW = dY * cols^T
                T::gemm(cout, ncols, rows, T::one(), &dymat, ncols as isize, 1, &cols, 1, ncols as isize, T::zero(), &mut g, rows as isize, 1);
                dw = Some(Tensor::new(wv.shape(), g).unwrap());
            }
            if need[0] {
                // dcols = W^T * dY
                T::gemm(rows, cout, ncols, T::one(), wv.data(), 1, rows as isize, &dymat, ncols as isize, 1, T::zero(), &mut cols, ncols as isize, 1);
                let mut g = vec![T::zero(); b * cin * h * wd];
                kernels::col2im(&cols, &dims, geom, &mut g);
                dx = Some(Tensor::new(&[b, cin, h, wd], g).unwrap());
            }
            let mut out = vec![dx, dw];
            if has_bias {
                let db = if need[2] {
                    let g: Vec<T> = (0..cout).map(|co| dymat[co * ncols..][..ncols].iter().copied().sum()).collect();
                    Some(Tensor::new(&[cout], g).unwrap())
                } else {
                    None
                };
                out.push(db);
            }
            out
        })
    }

    /// Depthwise filtering of every channel with one fixed kernel and
    /// reflective padding.
    pub fn filter_fixed(&self, x: Var, kernel: Rc<Vec<T>>, k: usize) -> Var {
        assert_eq!(kernel.len(), k * k);
        assert!(k % 2 == 1, "fixed filters are odd-sized");
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let mut y = vec![T::zero(); xv.len()];
        kernels::filter_reflect(xv.data(), b * c, h, w, &kernel, k, &mut y);
        let out = Tensor::new(xv.shape(), y).unwrap();
        self.push(out, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); dy.len()];
            kernels::filter_reflect_backward(dy.data(), b * c, h, w, &kernel, k, &mut dx);
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        })
    }

    // ---------------------------------------------------------- batch norm

    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, running_mean: ParamId, running_var: ParamId) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (b, c, h, w) = xv.dims4();
        let hw = h * w;
        let n = (b * hw) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xv.data()[(bi * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / n;
                    let mut q = 0.0;
                    for bi in 0..b {
                        q += xv.data()[(bi * c + ch) * hw..][..hw].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / n;
                }
                // Chain with updates already made in this graph (one layer
                // applied to both timestamps).
                let rm = self.latest_buffer(running_mean);
                let rv = self.latest_buffer(running_var);
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let new_rm = Tensor::from_fn(&[c], |i| T::of((1.0 - BN_MOMENTUM) * rm.data()[i].as_f64() + BN_MOMENTUM * mean[i]));
                let new_rv = Tensor::from_fn(&[c], |i| T::of((1.0 - BN_MOMENTUM) * rv.data()[i].as_f64() + BN_MOMENTUM * var[i] * unbias));
                let mut upd = self.buffer_updates.borrow_mut();
                upd.push((running_mean, new_rm));
                upd.push((running_var, new_rv));
                (mean, var)
            }
            Mode::Eval => {
                let rm = self.params.get(running_mean);
                let rv = self.params.get(running_var);
                (rm.data().iter().map(|v| v.as_f64()).collect(), rv.data().iter().map(|v| v.as_f64()).collect())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gm, bt) = (gv.data()[ch], bv.data()[ch]);
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = T::of((xv.data()[i].as_f64() - m) * is);
                    xhat[i] = xh;
                    y[i] = gm * xh + bt;
                }
            }
        }
        let out = Tensor::new(xv.shape(), y).unwrap();
        let train = self.mode == Mode::Train;
        self.push(out, &[x, gamma, beta], move |dy, need| {
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let g = dy.data()[i].as_f64();
                        sum_dy[ch] += g;
                        sum_dy_xhat[ch] += g * xhat[i].as_f64();
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let gm = gv.data()[ch].as_f64();
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let g = dy.data()[i].as_f64();
                            dx[i] = T::of(if train {
                                gm * inv_std[ch] / n * (n * g - sum_dy[ch] - xhat[i].as_f64() * sum_dy_xhat[ch])
                            } else {
                                gm * inv_std[ch] * g
                            });
                        }
                    }
                }
                Tensor::new(dy.shape(), dx).unwrap()
            });
            let dgamma = need[1].then(|| Tensor::from_fn(&[c], |i| T::of(sum_dy_xhat[i])));
            let dbeta = need[2].then(|| Tensor::from_fn(&[c], |i| T::of(sum_dy[i])));
            vec![dx, dgamma, dbeta]
        })
    }

    // --------------------------------------------------------- elementwise

    fn unary(&self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let xv = self.value(x);
        let out = xv.map(f);
        let yv = Rc::new(out.clone());
        self.push(out, &[x], move |dy, _| {
            // df(x, y) is the local derivative.
            let g = Tensor::from_fn(dy.shape(), |i| dy.data()[i] * df(xv.data()[i], yv.data()[i]));
            vec![Some(g)]
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| T::of(2.0) * x)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, da: impl Fn(T, T) -> T + 'static, db: impl Fn(T, T) -> T + 'static) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let out = av.zip_map(&bv, f);
        self.push(out, &[a, b], move |dy, need| {
            let ga = need[0].then(|| Tensor::from_fn(dy.shape(), |i| dy.data()[i] * da(av.data()[i], bv.data()[i])));
            let gb = need[1].then(|| Tensor::from_fn(dy.shape(), |i| dy.data()[i] * db(av.data()[i], bv.data()[i])));
            vec![ga, gb]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// `(1 - gamma) * a + gamma * b` with a scalar `gamma` node.
    pub fn mix(&self, a: Var, b: Var, gamma: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let gv = self.value(gamma);
        assert_eq!(av.shape(), bv.shape(), "mix: shape mismatch");
        assert_eq!(gv.len(), 1, "mix: gamma must be a scalar");
        let gm = gv.data()[0];
        let keep = T::one() - gm;
        let out = av.zip_map(&bv, |x, y| keep * x + gm * y);
        self.push(out, &[a, b, gamma], move |dy, need| {
            let ga = need[0].then(|| dy.map(|v| v * keep));
            let gb = need[1].then(|| dy.map(|v| v * gm));
            let gg = need[2].then(|| {
                let s: T = dy.data().iter().zip(av.data().iter().zip(bv.data())).map(|(&g, (&x, &y))| g * (y - x)).sum();
                Tensor::new(&[1], vec![s]).unwrap()
            });
            vec![ga, gb, gg]
        })
    }

    // -------------------------------------------------------------- layout

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let (b, _, h, w) = vals[0].dims4();
        let hw = h * w;
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (vb, vc, vh, vw) = v.dims4();
                assert_eq!((vb, vh, vw), (b, h, w), "concat_channels: mismatched maps");
                vc
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let mut y = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for (v, &c) in vals.iter().zip(&chans) {
                y.extend_from_slice(&v.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[b, ctot, h, w], y).unwrap();
        self.push(out, xs, move |dy, need| {
            let mut off = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&c, &n)| {
                    let start = off;
                    off += c;
                    n.then(|| {
                        let mut g = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            g.extend_from_slice(&dy.data()[(bi * ctot + start) * hw..(bi * ctot + start + c) * hw]);
                        }
                        Tensor::new(&[b, c, h, w], g).unwrap()
                    })
                })
                .collect()
        })
    }

    /// Per-sample concatenation of two equally shaped maps, ordered by
    /// descending activation sum; ties keep the given order.
    pub fn canonical_concat(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "canonical_concat: shape mismatch");
        let (nb, c, h, w) = av.dims4();
        let n = c * h * w;
        let swapped: Vec<bool> = (0..nb)
            .map(|i| {
                let sa: f64 = av.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).sum();
                let sb: f64 = bv.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).sum();
                sb > sa
            })
            .collect();
        let mut y = Vec::with_capacity(2 * av.len());
        for (i, &s) in swapped.iter().enumerate() {
            let (first, second) = if s { (&bv, &av) } else { (&av, &bv) };
            y.extend_from_slice(&first.data()[i * n..(i + 1) * n]);
            y.extend_from_slice(&second.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(&[nb, 2 * c, h, w], y).unwrap();
        self.push(out, &[a, b], move |dy, _| {
            let mut ga = vec![T::zero(); nb * n];
            let mut gb = vec![T::zero(); nb * n];
            for (i, &s) in swapped.iter().enumerate() {
                let first = &dy.data()[2 * i * n..(2 * i + 1) * n];
                let second = &dy.data()[(2 * i + 1) * n..(2 * i + 2) * n];
                let (to_a, to_b) = if s { (second, first) } else { (first, second) };
                ga[i * n..(i + 1) * n].copy_from_slice(to_a);
                gb[i * n..(i + 1) * n].copy_from_slice(to_b);
            }
            vec![Some(Tensor::new(&[nb, c, h, w], ga).unwrap()), Some(Tensor::new(&[nb, c, h, w], gb).unwrap())]
        })
    }

    /// Bilinear resize, align-corners false.
    pub fn resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        if (h, w) == (oh, ow) {
            return x;
        }
        let mut y = vec![T::zero(); b * c * oh * ow];
        kernels::resize_bilinear(xv.data(), b * c, h, w, oh, ow, &mut y);
        let out = Tensor::new(&[b, c, oh, ow], y).unwrap();
        self.push(out, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            kernels::resize_bilinear_backward(dy.data(), b * c, h, w, oh, ow, &mut dx);
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        })
    }

    pub fn max_pool(&self, x: Var, k: usize, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let oh = geom.out_size(h, k).expect("max_pool: window too large");
        let ow = geom.out_size(w, k).expect("max_pool: window too large");
        let mut y = vec![T::zero(); b * c * oh * ow];
        let arg = kernels::max_pool(xv.data(), b * c, h, w, k, geom, oh, ow, &mut y);
        let out = Tensor::new(&[b, c, oh, ow], y).unwrap();
        self.push(out, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for o in 0..oh * ow {
                    dx[p * h * w + arg[p * oh * ow + o] as usize] += dy.data()[p * oh * ow + o];
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        })
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out = Tensor::from_fn(&[b, c, 1, 1], |i| xv.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv);
        self.push(out, &[x], move |dy, _| {
            vec![Some(Tensor::from_fn(&[b, c, h, w], |i| dy.data()[i / hw] * inv))]
        })
    }

    /// 1-D convolution across the channel axis of a `[B, C, 1, 1]` map with
    /// an odd-length kernel and zero padding, no bias.
    pub fn channel_conv1d(&self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, c, h, wd) = xv.dims4();
        assert_eq!((h, wd), (1, 1), "channel_conv1d expects pooled input");
        let k = wv.len();
        assert!(k % 2 == 1);
        let r = (k / 2) as isize;
        let tap = move |ch: usize, j: usize| -> Option<usize> {
            let src = ch as isize + j as isize - r;
            (src >= 0 && src < c as isize).then_some(src as usize)
        };
        let out = Tensor::from_fn(&[b, c, 1, 1], |i| {
            let (bi, ch) = (i / c, i % c);
            (0..k).filter_map(|j| tap(ch, j).map(|s| wv.data()[j] * xv.data()[bi * c + s])).sum()
        });
        self.push(out, &[x, w], move |dy, need| {
            let mut gx = vec![T::zero(); b * c];
            let mut gw = vec![T::zero(); k];
            for bi in 0..b {
                for ch in 0..c {
                    let g = dy.data()[bi * c + ch];
                    for j in 0..k {
                        if let Some(s) = tap(ch, j) {
                            gx[bi * c + s] += wv.data()[j] * g;
                            gw[j] += xv.data()[bi * c + s] * g;
                        }
                    }
                }
            }
            vec![need[0].then(|| Tensor::new(&[b, c, 1, 1], gx).unwrap()), need[1].then(|| Tensor::new(&[k], gw).unwrap())]
        })
    }

    /// Multiply every channel plane of `x` by the matching entry of `s`
    /// (`[B, C, 1, 1]`).
    pub fn scale_channels(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let (b, c, h, w) = xv.dims4();
        assert_eq!(sv.shape(), &[b, c, 1, 1], "scale_channels: scale shape");
        let hw = h * w;
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * sv.data()[i / hw]);
        self.push(out, &[x, s], move |dy, need| {
            let gx = need[0].then(|| Tensor::from_fn(dy.shape(), |i| dy.data()[i] * sv.data()[i / hw]));
            let gs = need[1].then(|| {
                Tensor::from_fn(&[b, c, 1, 1], |p| (0..hw).map(|j| dy.data()[p * hw + j] * xv.data()[p * hw + j]).sum())
            });
            vec![gx, gs]
        })
    }

    // ---------------------------------------------------------- reductions

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(T::of(xv.sum()));
        self.push(out, &[x], move |dy, _| vec![Some(Tensor::full(&shape, dy.data()[0]))])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i weight_i * x_i` over scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let total: f64 = terms.iter().map(|&(v, w)| w * self.value(v).data()[0].as_f64()).sum();
        self.push(Tensor::scalar(T::of(total)), &vars, move |dy, need| {
            weights.iter().zip(need).map(|(&w, &n)| n.then(|| Tensor::scalar(dy.data()[0] * T::of(w)))).collect()
        })
    }

    // -------------------------------------------------------------- losses

    /// Mean softmax cross-entropy over pixels whose label is non-zero.
    /// `labels` holds one class index per `(batch, y, x)`. Returns 0 when no
    /// pixel is labelled.
    pub fn masked_cross_entropy(&self, logits: Var, labels: Rc<Vec<u8>>) -> Var {
        let lv = self.value(logits);
        let (b, c, h, w) = lv.dims4();
        let hw = h * w;
        assert_eq!(labels.len(), b * hw, "masked_cross_entropy: label count");
        let count = labels.iter().filter(|&&l| l > 0).count();
        let mut total = 0.0;
        let mut probs = vec![0.0f64; if self.record { b * c * hw } else { 0 }];
        for bi in 0..b {
            for p in 0..hw {
                let label = labels[bi * hw + p] as usize;
                if label == 0 {
                    continue;
                }
                assert!(label < c, "masked_cross_entropy: label {label} >= {c}");
                let at = |ch: usize| lv.data()[(bi * c + ch) * hw + p].as_f64();
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (at(ch) - mx).exp()).sum();
                total += z.ln() + mx - at(label);
                if self.record {
                    for ch in 0..c {
                        probs[(bi * c + ch) * hw + p] = (at(ch) - mx).exp() / z;
                    }
                }
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(Tensor::scalar(T::of(value)), &[logits], move |dy, _| {
            let mut g = vec![T::zero(); b * c * hw];
            if count > 0 {
                let s = dy.data()[0].as_f64() / count as f64;
                for bi in 0..b {
                    for p in 0..hw {
                        let label = labels[bi * hw + p] as usize;
                        if label == 0 {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (bi * c + ch) * hw + p;
                            let onehot = if ch == label { 1.0 } else { 0.0 };
                            g[i] = T::of(s * (probs[i] - onehot));
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], g).unwrap())]
        })
    }

    /// Mean binary cross-entropy with logits; positives weighted by
    /// `pos_weight`.
    pub fn bce_with_logits(&self, logits: Var, targets: Rc<Vec<T>>, pos_weight: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce_with_logits: target count");
        let n = lv.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &y)| {
                let (x, y) = (x.as_f64(), y.as_f64());
                pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x)
            })
            .sum();
        let shape = lv.shape().to_vec();
        self.push(Tensor::scalar(T::of(total / n)), &[logits], move |dy, _| {
            let s = dy.data()[0].as_f64() / n;
            let g = Tensor::from_fn(&shape, |i| {
                let x = lv.data()[i];
                let y = targets[i].as_f64();
                let p = sigmoid(x).as_f64();
                T::of(s * (pos_weight * y * (p - 1.0) + (1.0 - y) * p))
            });
            vec![Some(g)]
        })
    }

    /// Per-pixel cosine consistency between two feature maps: unchanged
    /// pixels pay `1 - cos` (evaluated as `|a^ - b^|^2 / 2`, so identical
    /// features give exactly zero), changed pixels pay `max(0, cos - margin)`.
    /// Each term is averaged over its own pixel set; empty sets contribute 0.
    pub fn similarity_loss(&self, a: Var, b: Var, changed: Rc<Vec<bool>>, margin: f64, eps: f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "similarity_loss: shape mismatch");
        let (nb, c, h, w) = av.dims4();
        let hw = h * w;
        assert_eq!(changed.len(), nb * hw, "similarity_loss: mask size");
        let n_changed = changed.iter().filter(|&&m| m).count();
        let n_same = changed.len() - n_changed;
        let norms = |t: &Tensor<T>| -> Vec<f64> {
            (0..nb * hw)
                .map(|q| {
                    let (bi, p) = (q / hw, q % hw);
                    (0..c).map(|ch| t.data()[(bi * c + ch) * hw + p].as_f64().powi(2)).sum::<f64>().sqrt().max(eps)
                })
                .collect()
        };
        let na = norms(&av);
        let nbv = norms(&bv);
        let mut same_total = 0.0;
        let mut changed_total = 0.0;
        let mut cosines = vec![0.0; nb * hw];
        for q in 0..nb * hw {
            let (bi, p) = (q / hw, q % hw);
            let mut dot = 0.0;
            let mut dist = 0.0;
            for ch in 0..c {
                let i = (bi * c + ch) * hw + p;
                let ua = av.data()[i].as_f64() / na[q];
                let ub = bv.data()[i].as_f64() / nbv[q];
                dot += ua * ub;
                dist += (ua - ub) * (ua - ub);
            }
            cosines[q] = dot;
            if changed[q] {
                changed_total += (dot - margin).max(0.0);
            } else {
                same_total += 0.5 * dist;
            }
        }
        let mut value = 0.0;
        if n_same > 0 {
            value += same_total / n_same as f64;
        }
        if n_changed > 0 {
            value += changed_total / n_changed as f64;
        }
        self.push(Tensor::scalar(T::of(value)), &[a, b], move |dy, need| {
            let s = dy.data()[0].as_f64();
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); av.len()];
            let mut ua = vec![0.0; c];
            let mut ub = vec![0.0; c];
            for q in 0..nb * hw {
                let (bi, p) = (q / hw, q % hw);
                let idx = |ch: usize| (bi * c + ch) * hw + p;
                for ch in 0..c {
                    ua[ch] = av.data()[idx(ch)].as_f64() / na[q];
                    ub[ch] = bv.data()[idx(ch)].as_f64() / nbv[q];
                }
                // Gradients with respect to the unit vectors.
                let (gua, gub): (Vec<f64>, Vec<f64>) = if changed[q] {
                    if cosines[q] - margin <= 0.0 {
                        continue;
                    }
                    let k = s / n_changed as f64;
                    (ub.iter().map(|v| v * k).collect(), ua.iter().map(|v| v * k).collect())
                } else {
                    let k = s / n_same as f64;
                    (ua.iter().zip(&ub).map(|(x, y)| (x - y) * k).collect(), ua.iter().zip(&ub).map(|(x, y)| (y - x) * k).collect())
                };
                // Chain through the normalization u = v / max(|v|, eps).
                let project = |u: &[f64], gu: &[f64], norm: f64, out: &mut [T]| {
                    let clamped = norm <= eps;
                    let ug: f64 = if clamped { 0.0 } else { u.iter().zip(gu).map(|(a, b)| a * b).sum() };
                    for ch in 0..c {
                        out[idx(ch)] = T::of((gu[ch] - u[ch] * ug) / norm);
                    }
                };
                if need[0] {
                    project(&ua, &gua, na[q], &mut ga);
                }
                if need[1] {
                    project(&ub, &gub, nbv[q], &mut gb);
                }
            }
            vec![
                need[0].then(|| Tensor::new(&[nb, c, h, w], ga).unwrap()),
                need[1].then(|| Tensor::new(&[nb, c, h, w], gb).unwrap()),
            ]
        })
    }
}
