//! Reverse-mode automatic differentiation over a growing tape.
//!
//! A [`Tape`] owns the nodes of one forward pass; [`Var`] is a cheap handle
//! (tape reference + node index). Ops append nodes whose parents always have
//! smaller indices, so the record graph is acyclic and a single reverse sweep
//! visits every node exactly once. One tape serves one forward/backward pass
//! and is confined to a single thread; tensors themselves are immutable
//! values, so the same parameters can feed many tapes concurrently.

use std::cell::{Cell, RefCell};

use super::kernels;
use super::{expect_chw, expect_same_shape, Scalar, Tensor};
use crate::error::TensorError;

enum Rule<T> {
    Leaf,
    Add,
    Mul,
    /// out = m * x + c; only m matters for the gradient
    Affine {
        m: T,
    },
    Matmul,
    Transpose,
    Softmax {
        axis: usize,
    },
    Conv2d {
        ks: usize,
        stride: usize,
    },
    GlobalMaxPool {
        argmax: Vec<usize>,
    },
    BilinearResize,
    Relu,
    Sigmoid,
    Ln,
    Clamp {
        lo: T,
        hi: T,
    },
    Sum,
    Reshape,
    /// out[c, p] = x[c, p] * v[c]
    MulChannels,
    /// out[c, p] = x[c, p] * a[p]
    MulPositions,
    Crop {
        y0: usize,
        x0: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    rule: Rule<T>,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a tensor on a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, rule: Rule<T>) -> Var<'_, T> {
        let requires_grad = match rule {
            Rule::Leaf => value.requires_grad(),
            _ => {
                let nodes = self.nodes.borrow();
                parents.iter().any(|&p| nodes[p].requires_grad)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Differentiable leaf (a parameter or input under training).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value.with_requires_grad(true), Vec::new(), Rule::Leaf)
    }

    /// Non-differentiable leaf; backward never allocates a gradient for it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value.with_requires_grad(false), Vec::new(), Rule::Leaf)
    }

    /// Reverse sweep from a scalar root. Errors on a non-scalar root, on a
    /// root with no differentiable ancestry, and on a second call for the
    /// same tape.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        if !root_node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::new(
            root_node.value.shape().to_vec(),
            vec![T::one()],
        ));

        for id in (0..=root.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].rule, Rule::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            let node = &nodes[id];
            let parent_grads = local_grads(node, &nodes, &g);
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                let pg = pg.expect("grad produced for differentiable parent");
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-rule vector-Jacobian products; entries align with `node.parents` and
/// are `None` only for parents that do not require gradients.
fn local_grads<T: Scalar>(
    node: &Node<T>,
    nodes: &[Node<T>],
    g: &Tensor<T>,
) -> Vec<Option<Tensor<T>>> {
    let pv = |i: usize| &nodes[node.parents[i]].value;
    let needs = |i: usize| nodes[node.parents[i]].requires_grad;
    match &node.rule {
        Rule::Leaf => Vec::new(),
        Rule::Add => vec![Some(g.clone()), Some(g.clone())],
        Rule::Mul => {
            let (a, b) = (pv(0), pv(1));
            let da = needs(0).then(|| {
                Tensor::new(
                    a.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
                )
            });
            let db = needs(1).then(|| {
                Tensor::new(
                    b.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(&x, &y)| x * y).collect(),
                )
            });
            vec![da, db]
        }
        Rule::Affine { m } => vec![Some(g.map(|v| v * *m))],
        Rule::Matmul => {
            let (a, b) = (pv(0), pv(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = needs(0).then(|| {
                let bt = kernels::transpose(b.data(), k, n);
                Tensor::new(vec![m, k], kernels::matmul(g.data(), &bt, m, n, k))
            });
            let db = needs(1).then(|| {
                let at = kernels::transpose(a.data(), m, k);
                Tensor::new(vec![k, n], kernels::matmul(&at, g.data(), k, m, n))
            });
            vec![da, db]
        }
        Rule::Transpose => {
            let s = node.value.shape();
            vec![Some(Tensor::new(
                pv(0).shape().to_vec(),
                kernels::transpose(g.data(), s[0], s[1]),
            ))]
        }
        Rule::Softmax { axis } => {
            let y = &node.value;
            let shape = y.shape();
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let mut dx = vec![T::zero(); y.numel()];
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut dot = T::zero();
                    for s in 0..len {
                        let idx = base + s * inner + i;
                        dot = dot + g.data()[idx] * y.data()[idx];
                    }
                    for s in 0..len {
                        let idx = base + s * inner + i;
                        dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(shape.to_vec(), dx))]
        }
        Rule::Conv2d { ks, stride } => {
            let (x, k) = (pv(0), pv(1));
            let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = k.shape()[0];
            let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
            let dx = needs(0).then(|| {
                Tensor::new(
                    x.shape().to_vec(),
                    kernels::conv2d_grad_input(g.data(), k.data(), cin, h, w, cout, *ks, *stride),
                )
            });
            let dk = needs(1).then(|| {
                Tensor::new(
                    k.shape().to_vec(),
                    kernels::conv2d_grad_kernel(g.data(), x.data(), cin, h, w, cout, *ks, *stride),
                )
            });
            let db = needs(2).then(|| {
                Tensor::new(vec![cout], kernels::conv2d_grad_bias(g.data(), cout, ho, wo))
            });
            vec![dx, dk, db]
        }
        Rule::GlobalMaxPool { argmax } => {
            let x = pv(0);
            let hw = x.shape()[1] * x.shape()[2];
            let mut dx = vec![T::zero(); x.numel()];
            for (c, &arg) in argmax.iter().enumerate() {
                dx[c * hw + arg] = g.data()[c];
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx))]
        }
        Rule::BilinearResize => {
            let x = pv(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
            vec![Some(Tensor::new(
                x.shape().to_vec(),
                kernels::bilinear_resize_grad(g.data(), c, h, w, ho, wo),
            ))]
        }
        Rule::Relu => {
            let x = pv(0);
            vec![Some(Tensor::new(
                x.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            ))]
        }
        Rule::Sigmoid => {
            let y = &node.value;
            vec![Some(Tensor::new(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect(),
            ))]
        }
        Rule::Ln => {
            let x = pv(0);
            vec![Some(Tensor::new(
                x.shape().to_vec(),
                g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect(),
            ))]
        }
        Rule::Clamp { lo, hi } => {
            let x = pv(0);
            vec![Some(Tensor::new(
                x.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { T::zero() })
                    .collect(),
            ))]
        }
        Rule::Sum => {
            let x = pv(0);
            vec![Some(Tensor::full(x.shape().to_vec(), g.data()[0]))]
        }
        Rule::Reshape => {
            let x = pv(0);
            vec![Some(Tensor::new(x.shape().to_vec(), g.data().to_vec()))]
        }
        Rule::MulChannels => {
            let (x, v) = (pv(0), pv(1));
            let hw = x.shape()[1] * x.shape()[2];
            let dx = needs(0).then(|| {
                let mut out = vec![T::zero(); x.numel()];
                for c in 0..x.shape()[0] {
                    let vc = v.data()[c];
                    for p in 0..hw {
                        out[c * hw + p] = g.data()[c * hw + p] * vc;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            });
            let dv = needs(1).then(|| {
                let mut out = vec![T::zero(); v.numel()];
                for (c, ov) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for p in 0..hw {
                        acc = acc + g.data()[c * hw + p] * x.data()[c * hw + p];
                    }
                    *ov = acc;
                }
                Tensor::new(v.shape().to_vec(), out)
            });
            vec![dx, dv]
        }
        Rule::MulPositions => {
            let (x, a) = (pv(0), pv(1));
            let hw = a.numel();
            let dx = needs(0).then(|| {
                let mut out = vec![T::zero(); x.numel()];
                for c in 0..x.shape()[0] {
                    for p in 0..hw {
                        out[c * hw + p] = g.data()[c * hw + p] * a.data()[p];
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            });
            let da = needs(1).then(|| {
                let mut out = vec![T::zero(); hw];
                for c in 0..x.shape()[0] {
                    for (p, ov) in out.iter_mut().enumerate() {
                        *ov = *ov + g.data()[c * hw + p] * x.data()[c * hw + p];
                    }
                }
                Tensor::new(a.shape().to_vec(), out)
            });
            vec![dx, da]
        }
        Rule::Crop { y0, x0 } => {
            let x = pv(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (hc, wc) = (node.value.shape()[1], node.value.shape()[2]);
            let mut dx = vec![T::zero(); x.numel()];
            for ch in 0..c {
                for y in 0..hc {
                    for xx in 0..wc {
                        dx[(ch * h + y0 + y) * w + x0 + xx] =
                            g.data()[(ch * hc + y) * wc + xx];
                    }
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx))]
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Clone of the node's value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn scalar_value(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.scalar_value()
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: Var<'t, T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with2(other, |a, b| {
            expect_same_shape("add", a, b)?;
            Ok::<_, TensorError>(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            ))
        })?;
        Ok(self.tape.push(value, vec![self.id, other.id], Rule::Add))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with2(other, |a, b| {
            expect_same_shape("mul", a, b)?;
            Ok::<_, TensorError>(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
            ))
        })?;
        Ok(self.tape.push(value, vec![self.id, other.id], Rule::Mul))
    }

    /// `m * x + c` elementwise.
    pub fn affine(self, m: T, c: T) -> Var<'t, T> {
        let value = self.with(|x| x.map(|v| m * v + c));
        self.tape.push(value, vec![self.id], Rule::Affine { m })
    }

    pub fn scale(self, m: T) -> Var<'t, T> {
        self.affine(m, T::zero())
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with2(other, |a, b| {
            match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) if k == k2 => Ok(Tensor::new(
                    vec![*m, *n],
                    kernels::matmul(a.data(), b.data(), *m, *k, *n),
                )),
                _ => Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                }),
            }
        })?;
        Ok(self.tape.push(value, vec![self.id, other.id], Rule::Matmul))
    }

    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let value = self.with(|a| match a.shape() {
            [m, n] => Ok(Tensor::new(
                vec![*n, *m],
                kernels::transpose(a.data(), *m, *n),
            )),
            _ => Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: a.shape().to_vec(),
            }),
        })?;
        Ok(self.tape.push(value, vec![self.id], Rule::Transpose))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let value = self.with(|x| {
            if axis >= x.shape().len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    shape: x.shape().to_vec(),
                });
            }
            Ok(Tensor::new(
                x.shape().to_vec(),
                kernels::softmax_axis(x.data(), x.shape(), axis),
            ))
        })?;
        Ok(self.tape.push(value, vec![self.id], Rule::Softmax { axis }))
    }

    /// Same-padded cross-correlation; stride 1 preserves spatial size,
    /// stride 2 halves it.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let (value, ks) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let k = &nodes[kernel.id].value;
            let b = &nodes[bias.id].value;
            let (cin, h, w) = expect_chw("conv2d", x)?;
            let (cout, kc, ks) = match *k.shape() {
                [cout, kc, k1, k2] if k1 == k2 => (cout, kc, k1),
                _ => {
                    return Err(TensorError::RankMismatch {
                        op: "conv2d kernel",
                        expected: 4,
                        shape: k.shape().to_vec(),
                    })
                }
            };
            if ks != 1 && ks != 3 {
                return Err(TensorError::KernelSize { k: ks });
            }
            if kc != cin || b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: x.shape().to_vec(),
                    right: k.shape().to_vec(),
                });
            }
            let (ho, wo) = (
                kernels::conv_out_extent(h, stride),
                kernels::conv_out_extent(w, stride),
            );
            let data =
                kernels::conv2d(x.data(), k.data(), b.data(), cin, h, w, cout, ks, stride);
            (Tensor::new(vec![cout, ho, wo], data), ks)
        };
        Ok(self.tape.push(
            value,
            vec![self.id, kernel.id, bias.id],
            Rule::Conv2d { ks, stride },
        ))
    }

    /// Per-channel spatial maximum; gradient routes to the first maximum in
    /// row-major order.
    pub fn global_max_pool(self) -> Result<Var<'t, T>, TensorError> {
        let (value, argmax) = self.with(|x| {
            let (c, h, w) = expect_chw("global_max_pool", x)?;
            let (vals, args) = kernels::global_max_pool(x.data(), c, h * w);
            Ok::<_, TensorError>((Tensor::new(vec![c], vals), args))
        })?;
        Ok(self
            .tape
            .push(value, vec![self.id], Rule::GlobalMaxPool { argmax }))
    }

    /// Align-corners-false bilinear resize to `ho x wo`.
    pub fn bilinear_resize(self, ho: usize, wo: usize) -> Result<Var<'t, T>, TensorError> {
        let value = self.with(|x| {
            let (c, h, w) = expect_chw("bilinear_resize", x)?;
            Ok::<_, TensorError>(Tensor::new(
                vec![c, ho, wo],
                kernels::bilinear_resize(x.data(), c, h, w, ho, wo),
            ))
        })?;
        Ok(self.tape.push(value, vec![self.id], Rule::BilinearResize))
    }

    /// Doubles both spatial extents.
    pub fn upsample2(self) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        let (h, w) = (s[1], s[2]);
        self.bilinear_resize(2 * h, 2 * w)
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.with(|x| x.map(|v| v.max(T::zero())));
        self.tape.push(value, vec![self.id], Rule::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.with(|x| x.map(|v| T::one() / (T::one() + (-v).exp())));
        self.tape.push(value, vec![self.id], Rule::Sigmoid)
    }

    pub fn ln(self) -> Var<'t, T> {
        let value = self.with(|x| x.map(|v| v.ln()));
        self.tape.push(value, vec![self.id], Rule::Ln)
    }

    /// Clamps to `[lo, hi]`. NaN propagates (float max/min would launder it
    /// to a bound, hiding divergence from the loss guard).
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let value = self.with(|x| {
            x.map(|v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
        });
        self.tape.push(value, vec![self.id], Rule::Clamp { lo, hi })
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = self.with(|x| Tensor::scalar(x.data().iter().copied().sum()));
        self.tape.push(value, vec![self.id], Rule::Sum)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with(|x| x.reshaped(shape.into()))?;
        Ok(self.tape.push(value, vec![self.id], Rule::Reshape))
    }

    /// Broadcast multiply of a `[C]` vector over the spatial grid of a
    /// `[C, H, W]` map.
    pub fn mul_channels(self, v: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with2(v, |x, vv| {
            let (c, h, w) = expect_chw("mul_channels", x)?;
            if vv.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_channels",
                    left: x.shape().to_vec(),
                    right: vv.shape().to_vec(),
                });
            }
            let mut out = vec![T::zero(); x.numel()];
            for ch in 0..c {
                let s = vv.data()[ch];
                for p in 0..h * w {
                    out[ch * h * w + p] = x.data()[ch * h * w + p] * s;
                }
            }
            Ok(Tensor::new(x.shape().to_vec(), out))
        })?;
        Ok(self.tape.push(value, vec![self.id, v.id], Rule::MulChannels))
    }

    /// Broadcast multiply of an `[H, W]` field over every channel of a
    /// `[C, H, W]` map.
    pub fn mul_positions(self, a: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = self.with2(a, |x, av| {
            let (c, h, w) = expect_chw("mul_positions", x)?;
            if av.numel() != h * w {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_positions",
                    left: x.shape().to_vec(),
                    right: av.shape().to_vec(),
                });
            }
            let mut out = vec![T::zero(); x.numel()];
            for ch in 0..c {
                for p in 0..h * w {
                    out[ch * h * w + p] = x.data()[ch * h * w + p] * av.data()[p];
                }
            }
            Ok(Tensor::new(x.shape().to_vec(), out))
        })?;
        Ok(self
            .tape
            .push(value, vec![self.id, a.id], Rule::MulPositions))
    }

    /// Spatial crop `[y0..y1) x [x0..x1)` of a `[C, H, W]` map.
    pub fn crop(
        self,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let value = self.with(|x| {
            let (c, h, w) = expect_chw("crop", x)?;
            if y0 >= y1 || y1 > h || x0 >= x1 || x1 > w {
                return Err(TensorError::BadCrop {
                    y0,
                    y1,
                    x0,
                    x1,
                    h,
                    w,
                });
            }
            let (hc, wc) = (y1 - y0, x1 - x0);
            let mut out = vec![T::zero(); c * hc * wc];
            for ch in 0..c {
                for y in 0..hc {
                    for xx in 0..wc {
                        out[(ch * hc + y) * wc + xx] = x.data()[(ch * h + y0 + y) * w + x0 + xx];
                    }
                }
            }
            Ok(Tensor::new(vec![c, hc, wc], out))
        })?;
        Ok(self.tape.push(value, vec![self.id], Rule::Crop { y0, x0 }))
    }
}
