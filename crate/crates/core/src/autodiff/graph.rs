//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so the tape is always in
//! topological order and the backward pass is a single reverse sweep.
//! Values that feed more than one consumer receive the sum of all path
//! gradients.

use std::borrow::Cow;

use super::conv::{self, Conv3dGeometry, PoolGeometry};
use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;

    /// Gradients for each input, given the output gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Vec<Tensor<F>>;
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { pred: Var, target: Vec<F> },
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Reshape(Var),
    Permute { src: Var, perm: Vec<usize> },
    Conv3d { input: Var, weight: Var, bias: Var, geom: Conv3dGeometry },
    MaxPool3d { input: Var, argmax: Vec<usize> },
    Dropout { input: Var, mask: Vec<F> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "max_pool3d",
            Op::Dropout { .. } => "dropout",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    tracked: bool,
}

/// Recording of one forward computation.
///
/// Leaves may borrow their values (parameters) for the lifetime `'a`, so
/// building a graph per clip does not copy the model.
pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
}

impl<'a, F: Real> Default for Graph<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Tracked leaf borrowing an existing tensor (a trainable parameter).
    pub fn param(&mut self, value: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Tracked leaf owning its value.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Untracked leaf; no gradient is ever propagated into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    /// Copy of `v` that stops gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<F>>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AfnError::NonFinite {
                context: format!("{} (node {})", op.name(), self.nodes.len()),
            });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AfnError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AfnError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 1 {
            return Err(AfnError::dim("softmax", va.shape(), &[va.len()]));
        }
        if !va.is_finite() {
            return Err(AfnError::NonFinite {
                context: "softmax input".into(),
            });
        }
        let value = Tensor::vector(softmax_raw(va.data()));
        self.push(value, Op::Softmax(a), &[a])
    }

    /// `-sum_i target_i * ln(max(pred_i, floor))`.
    pub fn cross_entropy(&mut self, target: &Tensor<F>, pred: Var) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(AfnError::dim("cross_entropy", target.shape(), vp.shape()));
        }
        let floor = F::of(PROB_FLOOR);
        let loss = target
            .data()
            .iter()
            .zip(vp.data())
            .map(|(&t, &p)| t * p.max(floor).ln())
            .sum::<F>();
        let value = Tensor::scalar(-loss);
        let op = Op::CrossEntropy {
            pred,
            target: target.data().to_vec(),
        };
        self.push(value, op, &[pred])
    }

    /// Concatenation of the flattened inputs into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AfnError::Invalid("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::vector(data);
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Contiguous range `[start, start + len)` of the flattened input.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let vs = self.value(src);
        if len == 0 || start + len > vs.len() {
            return Err(AfnError::dim("slice", vs.shape(), &[start, len]));
        }
        let value = Tensor::vector(vs.data()[start..start + len].to_vec());
        self.push(value, Op::Slice { src, start }, &[src])
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        if shape.iter().product::<usize>() != vs.len() {
            return Err(AfnError::dim("reshape", vs.shape(), shape));
        }
        let value = vs.reshape(shape)?;
        self.push(value, Op::Reshape(src), &[src])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, src: Var, perm: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let rank = vs.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(AfnError::dim("permute", vs.shape(), perm));
        }
        let value = permute_raw(vs, perm);
        self.push(
            value,
            Op::Permute {
                src,
                perm: perm.to_vec(),
            },
            &[src],
        )
    }

    /// 3-D convolution, stride 1, zero padding.
    ///
    /// `input` is `[C_in, D, H, W]`, `weight` is `[C_out, C_in, kd, kh, kw]`
    /// and `bias` is `[C_out]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, padding: [usize; 3]) -> Result<Var> {
        let geom = Conv3dGeometry::new(self.shape(input), self.shape(weight), self.shape(bias), padding)?;
        let out = conv::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&geom.output_shape(), out)?;
        self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    /// Non-overlapping max pooling over `[C, D, H, W]` with stride equal to
    /// the window; trailing remainders are dropped.
    pub fn max_pool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(input), window)?;
        let (out, argmax) = conv::max_pool3d_forward(&geom, self.value(input).data());
        let value = Tensor::new(&geom.output_shape(), out)?;
        self.push(value, Op::MaxPool3d { input, argmax }, &[input])
    }

    /// Multiplies by a precomputed mask (see [`super::dropout_mask`]).
    pub fn dropout(&mut self, input: Var, mask: &Tensor<F>) -> Result<Var> {
        self.same_shape_tensor("dropout", input, mask)?;
        let value = Tensor::new(
            self.shape(input),
            self.value(input)
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&x, &m)| x * m)
                .collect(),
        )?;
        let op = Op::Dropout {
            input,
            mask: mask.data().to_vec(),
        };
        self.push(value, op, &[input])
    }

    fn same_shape_tensor(&self, op: &'static str, a: Var, t: &Tensor<F>) -> Result<()> {
        if self.shape(a) != t.shape() {
            return Err(AfnError::dim(op, self.shape(a), t.shape()));
        }
        Ok(())
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values)?;
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// `weight · x + bias` for a 1-D `x`; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let col = self.reshape(x, &[n_in, 1])?;
        let y = self.matmul(weight, col)?;
        let n_out = self.shape(y)[0];
        let y = self.reshape(y, &[n_out])?;
        self.add(y, bias)
    }

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(AfnError::dim("backward root", self.shape(root), &[1]));
        }
        let seed = Tensor::full(self.shape(root), F::one());
        self.backward_with(&[(root, seed)])
    }

    /// Backward pass from arbitrary seed gradients; seeds on the same node add.
    pub fn backward_with(&self, seeds: &[(Var, Tensor<F>)]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.shape(*v) {
                return Err(AfnError::dim("backward seed", seed.shape(), self.shape(*v)));
            }
            self.accumulate(&mut grads, *v, seed.data().iter().copied());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: impl Iterator<Item = F>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib.collect()),
        }
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.is_tracked(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == F::zero() {
                                continue;
                            }
                            let row = &mut da[i * k..(i + 1) * k];
                            for (p, r) in row.iter_mut().enumerate() {
                                *r = *r + gij * vb.data()[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, da.into_iter());
                }
                if self.is_tracked(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            if aip == F::zero() {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (j, r) in row.iter_mut().enumerate() {
                                *r = *r + aip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db.into_iter());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y));
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x));
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *k));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(out).map(|(&g, &y)| g * y * (F::one() - y)),
                );
            }
            Op::Tanh(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(out).map(|(&g, &y)| g * (F::one() - y * y)),
                );
            }
            Op::Softmax(a) => {
                let dot: F = g.iter().zip(out).map(|(&g, &y)| g * y).sum();
                self.accumulate(grads, *a, g.iter().zip(out).map(|(&g, &y)| y * (g - dot)));
            }
            Op::CrossEntropy { pred, target } => {
                let floor = F::of(PROB_FLOOR);
                let vp = self.value(*pred).data();
                self.accumulate(
                    grads,
                    *pred,
                    target.iter().zip(vp).map(|(&t, &p)| {
                        if p > floor {
                            -g[0] * t / p
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::Slice { src, start } => {
                let n = self.value(*src).len();
                let (start, len) = (*start, g.len());
                self.accumulate(
                    grads,
                    *src,
                    (0..n).map(|i| {
                        if i >= start && i < start + len {
                            g[i - start]
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::Reshape(src) => {
                self.accumulate(grads, *src, g.iter().copied());
            }
            Op::Permute { src, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let back = permute_raw(&gt, &inverse);
                self.accumulate(grads, *src, back.into_data().into_iter());
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.is_tracked(*input) {
                    let di = conv::conv3d_grad_input(geom, g, self.value(*weight).data());
                    self.accumulate(grads, *input, di.into_iter());
                }
                if self.is_tracked(*weight) {
                    let dw = conv::conv3d_grad_weight(geom, g, self.value(*input).data());
                    self.accumulate(grads, *weight, dw.into_iter());
                }
                if self.is_tracked(*bias) {
                    let db = conv::conv3d_grad_bias(geom, g);
                    self.accumulate(grads, *bias, db.into_iter());
                }
            }
            Op::MaxPool3d { input, argmax } => {
                let n = self.value(*input).len();
                let mut di = vec![F::zero(); n];
                for (&src, &gv) in argmax.iter().zip(g) {
                    di[src] = di[src] + gv;
                }
                self.accumulate(grads, *input, di.into_iter());
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(&g, &m)| g * m));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let back = op.backward(&values, &node.value, &gt);
                for (v, b) in inputs.iter().zip(back) {
                    self.accumulate(grads, *v, b.into_data().into_iter());
                }
            }
        }
    }
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_raw<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r = *r + aip * bv;
            }
        }
    }
    out
}

fn permute_raw<F: Real>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.len() {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        out.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = g.constant(Tensor::eye(3));
        let bv = g.constant(b.clone());
        let out = g.matmul(i3, bv).unwrap();
        assert_eq!(g.value(out), &b);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(AfnError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(x).unwrap();
        for (p, e) in g.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(g.softmax(x), Err(AfnError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let onehot2 = t(&[3], &[0.0, 0.0, 1.0]);
        let p = g.constant(onehot2.clone());
        let l = g.cross_entropy(&onehot2, p).unwrap();
        assert!(g.scalar(l).abs() <= 1e-7);

        let p = g.constant(t(&[2], &[0.5, 0.5]));
        let l = g.cross_entropy(&t(&[2], &[1.0, 0.0]), p).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let p = g.constant(t(&[2], &[0.5, 0.5]));
        assert!(g.cross_entropy(&t(&[3], &[1.0, 0.0, 0.0]), p).is_err());
    }

    #[test]
    fn cross_entropy_over_softmax_has_pred_minus_target_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.input(t(&[4], &[0.3, -1.2, 2.0, 0.1]));
        let p = g.softmax(z).unwrap();
        let target = t(&[4], &[0.0, 1.0, 0.0, 0.0]);
        let l = g.cross_entropy(&target, p).unwrap();
        let grads = g.backward(l).unwrap();
        let dz = grads.get(z).unwrap();
        for ((d, p), y) in dz.data().iter().zip(g.value(p).data()).zip(target.data()) {
            assert!((d - (p - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x*x + 3x at x = 2 -> df/dx = 2x + 3 = 7
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let f = g.add(sq, lin).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let c = g.detach(x);
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn permute_round_trips() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }
}
