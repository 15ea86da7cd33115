//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates gradients
//! for every node that depends on a trainable leaf. Domain modules (renderer,
//! geometry) add fused operations with hand-derived derivatives through
//! [`Tape::push_op`].

use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of a recorded operation.
pub trait Backward<T: Real> {
    /// Returns one gradient per parent, in parent order. Entries for parents
    /// whose `needs_grad` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Constant copy of `var`'s value: gradient does not flow through it.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    /// Records a custom operation. The backward closure is only kept when
    /// some parent requires a gradient.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(
            self.nodes[loss.0].value.shape().to_vec(),
            T::one(),
        ));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())]
    }
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![n[0].then(|| g.clone()), n[1].then(|| g.map(|v| -v))]
    }
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            n[0].then(|| g.zip_map(x[1], |a, b| a * b)),
            n[1].then(|| g.zip_map(x[0], |a, b| a * b)),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let c = self.0;
        vec![Some(g.map(|v| v * c))]
    }
}

struct ReshapeOp(Vec<usize>);
impl<T: Real> Backward<T> for ReshapeOp {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(self.0.clone()))]
    }
}

// ---------------------------------------------------------------------------
// Unary activations

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    LogSigmoid,
}

struct UnaryOp(Unary);
impl<T: Real> Backward<T> for UnaryOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let one = T::one();
        let d: Vec<T> = match self.0 {
            Unary::Relu => x[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Unary::LeakyRelu(a) => {
                let a = T::from_f64_lossy(a);
                x[0].data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { g * a })
                    .collect()
            }
            Unary::Sigmoid => y
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &g)| g * s * (one - s))
                .collect(),
            Unary::Tanh => y
                .data()
                .iter()
                .zip(g.data())
                .map(|(&t, &g)| g * (one - t * t))
                .collect(),
            // d/dx log sigmoid(x) = sigmoid(-x)
            Unary::LogSigmoid => x[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| g * sigmoid(-x))
                .collect(),
        };
        vec![Some(Tensor::new(g.shape().to_vec(), d))]
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically safe `log(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Reductions

struct SumOp;
impl<T: Real> Backward<T> for SumOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(x[0].shape().to_vec(), g.item()))]
    }
}

struct SumSqOp;
impl<T: Real> Backward<T> for SumSqOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let two_g = g.item() + g.item();
        vec![Some(x[0].map(|v| v * two_g))]
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Real> Backward<T> for MatMulOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (m, k, nn) = (self.m, self.k, self.n);
        let ga = n[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            gemm(
                false,
                true,
                m,
                k,
                nn,
                T::one(),
                g.data(),
                x[1].data(),
                T::zero(),
                &mut out,
            );
            Tensor::new(x[0].shape().to_vec(), out)
        });
        let gb = n[1].then(|| {
            let mut out = vec![T::zero(); k * nn];
            gemm(
                true,
                false,
                k,
                nn,
                m,
                T::one(),
                x[0].data(),
                g.data(),
                T::zero(),
                &mut out,
            );
            Tensor::new(x[1].shape().to_vec(), out)
        });
        vec![ga, gb]
    }
}

/// Bias along axis 1, broadcast over axis 0 and all trailing axes.
struct AddBiasOp {
    outer: usize,
    channels: usize,
    inner: usize,
}
impl<T: Real> Backward<T> for AddBiasOp {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let gb = n[1].then(|| {
            let mut acc = vec![T::zero(); self.channels];
            let gd = g.data();
            for o in 0..self.outer {
                for (c, a) in acc.iter_mut().enumerate() {
                    let base = (o * self.channels + c) * self.inner;
                    *a = *a + gd[base..base + self.inner].iter().copied().sum::<T>();
                }
            }
            Tensor::new([self.channels], acc)
        });
        vec![n[0].then(|| g.clone()), gb]
    }
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, square kernel, zero padding)

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src =
                            &img[(c * self.height + ih as usize) * self.width..][..self.width];
                        for (ow, d) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.width as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], img: &mut [T]) {
        let cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut img[(c * self.height + ih as usize) * self.width..][..self.width];
                        let line = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        for (ow, &v) in line.iter().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.width {
                                dst[iw as usize] = dst[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
    batch: usize,
    out_channels: usize,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let geo = self.geom;
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let in_per = geo.channels * geo.height * geo.width;
        let out_per = self.out_channels * cols;
        let mut col = vec![T::zero(); rows * cols];
        let mut gcol = vec![T::zero(); rows * cols];
        let mut gx = n[0].then(|| vec![T::zero(); self.batch * in_per]);
        let mut gw = n[1].then(|| vec![T::zero(); self.out_channels * rows]);
        for b in 0..self.batch {
            let gout = &g.data()[b * out_per..(b + 1) * out_per];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&x[0].data()[b * in_per..(b + 1) * in_per], &mut col);
                gemm(
                    false,
                    true,
                    self.out_channels,
                    rows,
                    cols,
                    T::one(),
                    gout,
                    &col,
                    T::one(),
                    gw,
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    true,
                    false,
                    rows,
                    cols,
                    self.out_channels,
                    T::one(),
                    x[1].data(),
                    gout,
                    T::zero(),
                    &mut gcol,
                );
                geo.col2im(&gcol, &mut gx[b * in_per..(b + 1) * in_per]);
            }
        }
        vec![
            gx.map(|d| Tensor::new(x[0].shape().to_vec(), d)),
            gw.map(|d| Tensor::new(x[1].shape().to_vec(), d)),
        ]
    }
}

// ---------------------------------------------------------------------------
// Layout ops

struct Upsample2xOp;
impl<T: Real> Backward<T> for Upsample2xOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * h * w];
        let gd = g.data();
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    let o = &mut out[(p * h + i / 2) * w + j / 2];
                    *o = *o + gd[(p * 2 * h + i) * 2 * w + j];
                }
            }
        }
        vec![Some(Tensor::new(s.to_vec(), out))]
    }
}

struct ConcatChannelsOp {
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}
impl<T: Real> Backward<T> for ConcatChannelsOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(x.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if n[i] {
                let mut d = Vec::with_capacity(self.batch * c * self.plane);
                for b in 0..self.batch {
                    let start = (b * total + offset) * self.plane;
                    d.extend_from_slice(&g.data()[start..start + c * self.plane]);
                }
                out.push(Some(Tensor::new(x[i].shape().to_vec(), d)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct BatchRollOp(usize);
impl<T: Real> Backward<T> for BatchRollOp {
    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let b = g.dim(0);
        vec![Some(roll_batch(g, b - self.0 % b))]
    }
}

/// `out[i] = x[(i + shift) % B]` along axis 0.
fn roll_batch<T: Real>(x: &Tensor<T>, shift: usize) -> Tensor<T> {
    let b = x.dim(0);
    let per = x.len() / b;
    let mut data = Vec::with_capacity(x.len());
    for i in 0..b {
        let src = (i + shift) % b;
        data.extend_from_slice(&x.data()[src * per..(src + 1) * per]);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Subtracts joint `joint` from every joint: `[B, J, C]`.
struct SubJointOp(usize);
impl<T: Real> Backward<T> for SubJointOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        let (b, j, c) = (s[0], s[1], s[2]);
        let mut out = g.clone();
        let od = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let total: T = (0..j).map(|ji| g.data()[(bi * j + ji) * c + ci]).sum();
                let r = (bi * j + self.0) * c + ci;
                od[r] = od[r] - total;
            }
        }
        vec![Some(out)]
    }
}

/// Expected pixel-centre coordinate under a softmax over each heatmap.
struct SoftArgmaxOp {
    probs: Vec<f64>,
    height: usize,
    width: usize,
}
impl<T: Real> Backward<T> for SoftArgmaxOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (h, w) = (self.height, self.width);
        let maps = x[0].len() / (h * w);
        let mut out = vec![T::zero(); x[0].len()];
        for m in 0..maps {
            let ex = y.data()[2 * m].to_f64_lossy();
            let ey = y.data()[2 * m + 1].to_f64_lossy();
            let gx = g.data()[2 * m].to_f64_lossy();
            let gy = g.data()[2 * m + 1].to_f64_lossy();
            for r in 0..h {
                let cy = pixel_center(r, h);
                for c in 0..w {
                    let cx = pixel_center(c, w);
                    let k = m * h * w + r * w + c;
                    let p = self.probs[k];
                    out[k] = T::from_f64_lossy(p * ((cx - ex) * gx + (cy - ey) * gy));
                }
            }
        }
        vec![Some(Tensor::new(x[0].shape().to_vec(), out))]
    }
}

/// Normalized coordinate of the centre of pixel `index` on an axis of `size` pixels.
pub fn pixel_center(index: usize, size: usize) -> f64 {
    (2 * index + 1) as f64 / size as f64 - 1.0
}

// ---------------------------------------------------------------------------
// Tape methods for the built-in ops

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, &[a, b], AddOp)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, &[a, b], SubOp)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, &[a, b], MulOp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, &[a], ScaleOp(c))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let old = self.shape(a).to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.push_op(v, &[a], ReshapeOp(old))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = match kind {
            Unary::Relu => self.value(a).map(|x| x.max(T::zero())),
            Unary::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s);
                self.value(a).map(|x| if x > T::zero() { x } else { x * s })
            }
            Unary::Sigmoid => self.value(a).map(sigmoid),
            Unary::Tanh => self.value(a).map(|x| x.tanh()),
            Unary::LogSigmoid => self.value(a).map(log_sigmoid),
        };
        self.push_op(v, &[a], UnaryOp(kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, &[a], SumOp)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared elements.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|&x| x * x).sum());
        self.push_op(v, &[a], SumSqOp)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        self.push_op(Tensor::new([m, n], out), &[a, b], MatMulOp { m, k, n })
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        let channels = s[1];
        assert_eq!(self.shape(bias), [channels], "bias length");
        let outer = s[0];
        let inner: usize = s[2..].iter().product();
        let mut v = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for o in 0..outer {
            for (c, &bv) in bd.iter().enumerate() {
                let base = (o * channels + c) * inner;
                for e in &mut v.data_mut()[base..base + inner] {
                    *e = *e + bv;
                }
            }
        }
        self.push_op(
            v,
            &[x, bias],
            AddBiasOp {
                outer,
                channels,
                inner,
            },
        )
    }

    /// `x: [B, C, H, W]`, `weight: [O, C, k, k]`; zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        assert_eq!(sx.len(), 4, "conv2d input must be NCHW");
        assert_eq!(sw.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch");
        assert_eq!(sw[2], sw[3], "square kernels only");
        let k = sw[2];
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: k,
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - k) / stride + 1,
            out_w: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let (batch, oc) = (sx[0], sw[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_per = geom.channels * geom.height * geom.width;
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); batch * oc * cols];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            for b in 0..batch {
                geom.im2col(&xd[b * in_per..(b + 1) * in_per], &mut col);
                gemm(
                    false,
                    false,
                    oc,
                    cols,
                    rows,
                    T::one(),
                    wd,
                    &col,
                    T::zero(),
                    &mut out[b * oc * cols..(b + 1) * oc * cols],
                );
            }
        }
        let v = Tensor::new([batch, oc, geom.out_h, geom.out_w], out);
        self.push_op(
            v,
            &[x, weight],
            Conv2dOp {
                geom,
                batch,
                out_channels: oc,
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push_op(
            Tensor::new([s[0], s[1], 2 * h, 2 * w], out),
            &[x],
            Upsample2xOp,
        )
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let (batch, plane) = (first[0], first[2] * first[3]);
        let channels: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert!(
                    s[0] == batch && s[2] * s[3] == plane && s[2] == first[2],
                    "concat shape mismatch"
                );
                s[1]
            })
            .collect();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for (&v, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let v = Tensor::new([batch, total, first[2], first[3]], out);
        self.push_op(
            v,
            xs,
            ConcatChannelsOp {
                channels,
                batch,
                plane,
            },
        )
    }

    /// `out[i] = x[(i + shift) mod B]` along the batch axis.
    pub fn batch_roll(&mut self, x: Var, shift: usize) -> Var {
        let v = roll_batch(self.value(x), shift);
        self.push_op(v, &[x], BatchRollOp(shift))
    }

    /// Re-expresses `[B, J, C]` coordinates relative to joint `joint`.
    pub fn sub_joint(&mut self, x: Var, joint: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "sub_joint expects [B, J, C]");
        let (b, j, c) = (s[0], s[1], s[2]);
        let mut v = self.value(x).clone();
        let d = v.data_mut();
        for bi in 0..b {
            let root: Vec<T> = (0..c).map(|ci| d[(bi * j + joint) * c + ci]).collect();
            for ji in 0..j {
                for ci in 0..c {
                    let e = &mut d[(bi * j + ji) * c + ci];
                    *e = *e - root[ci];
                }
            }
        }
        self.push_op(v, &[x], SubJointOp(joint))
    }

    /// Spatial soft-argmax: `[B, J, h, w]` heatmap logits to `[B, J, 2]`
    /// expected `(x, y)` coordinates in normalized image units.
    pub fn soft_argmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "soft_argmax expects [B, J, h, w]");
        let (b, j, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut probs = vec![0.0f64; xd.len()];
        let mut out = Vec::with_capacity(b * j * 2);
        for m in 0..b * j {
            let logits = &xd[m * h * w..(m + 1) * h * w];
            let mx = logits
                .iter()
                .fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64_lossy()));
            let p = &mut probs[m * h * w..(m + 1) * h * w];
            let mut z = 0.0;
            for (pi, &l) in p.iter_mut().zip(logits) {
                *pi = (l.to_f64_lossy() - mx).exp();
                z += *pi;
            }
            let (mut ex, mut ey) = (0.0, 0.0);
            for r in 0..h {
                let cy = pixel_center(r, h);
                for c in 0..w {
                    let pi = &mut p[r * w + c];
                    *pi /= z;
                    ex += *pi * pixel_center(c, w);
                    ey += *pi * cy;
                }
            }
            out.push(T::from_f64_lossy(ex));
            out.push(T::from_f64_lossy(ey));
        }
        let v = Tensor::new([b, j, 2], out);
        self.push_op(
            v,
            &[x],
            SoftArgmaxOp {
                probs,
                height: h,
                width: w,
            },
        )
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    // weights fixed so the probe is a non-symmetric scalar
    fn probe(t: &mut Tape<f64>, v: Var) -> Var {
        let n = t.value(v).len();
        let w = Tensor::new(
            t.shape(v).to_vec(),
            (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
        );
        let w = t.constant(w);
        let m = t.mul(v, w);
        t.sum(m)
    }

    #[test]
    fn elementwise_and_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let err = check(
            &[a, b],
            |t, v| {
                let s = t.sub(v[0], v[1]);
                let m = t.mul(s, v[0]);
                let x = t.add(m, v[1]);
                let y = t.tanh(x);
                let z = t.sigmoid(y);
                let l = t.log_sigmoid(z);
                let q = t.leaky_relu(l, 0.2);
                let r = t.scale(q, 3.0);
                probe(t, r)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_bias_and_sum_sq_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let err = check(
            &[a, w, b],
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let o = t.add_bias(m, v[2]);
                t.sum_sq(o)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_upsample_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 2, 6, 6], &mut rng);
        let w1 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let w2 = rand_tensor(&[2, 5, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let err = check(
            &[x, w1, w2, b],
            |t, v| {
                let c = t.conv2d(v[0], v[1], 2, 1);
                let c = t.add_bias(c, v[3]);
                let u = t.upsample2x(c);
                let cat = t.concat_channels(&[u, v[0]]);
                let o = t.conv2d(cat, v[2], 1, 1);
                probe(t, o)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let o = t.conv2d(xv, wv, 2, 1);
        assert_eq!(t.shape(o), [1, 3, 3, 3]);
        for oc in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                    acc += x.data()[(c * 5 + ih as usize) * 5 + iw as usize]
                                        * w.data()[((oc * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = t.value(o).data()[(oc * 3 + oh) * 3 + ow];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layout_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[3, 4, 2], &mut rng);
        let err = check(
            &[x],
            |t, v| {
                let c = t.sub_joint(v[0], 2);
                let r = t.batch_roll(c, 1);
                let d = t.sub(c, r);
                let f = t.reshape(d, [3, 8]);
                probe(t, f)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn soft_argmax_grad_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let err = check(
            std::slice::from_ref(&x),
            |t, v| {
                let s = t.soft_argmax(v[0]);
                probe(t, s)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.map(|a| a * 100.0));
        let s = t.soft_argmax(v);
        assert!(t.value(s).data().iter().all(|c| c.abs() < 1.0));
    }

    #[test]
    fn soft_argmax_peaked_map_hits_pixel_center() {
        let mut x = Tensor::<f64>::full([1, 1, 4, 4], -1e3);
        x.data_mut()[4 + 2] = 0.0; // row 1, col 2
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.soft_argmax(v);
        let d = t.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::new([2], vec![1.0, 2.0]));
        let c = t.constant(Tensor::new([2], vec![3.0, 4.0]));
        let d = t.detach(a);
        let m = t.mul(a, c);
        let m2 = t.mul(m, d);
        let s = t.sum(m2);
        let g = t.backward(s);
        assert!(g.get(c).is_none() && g.get(d).is_none());
        // d/da (a*c*a_detached) = c * a
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0f64).is_finite());
        assert_eq!(log_sigmoid(800.0f64), 0.0);
    }
}
