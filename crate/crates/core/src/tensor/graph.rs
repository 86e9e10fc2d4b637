use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Window};
use super::{mismatch, Real, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul { transpose_b: bool },
    Reshape,
    Permute(Vec<usize>),
    BroadcastTo,
    BiasAdd { axis: usize },
    Conv2d { stride: usize, padding: usize },
    ConvTranspose2d { stride: usize, padding: usize },
    Bilinear { height: usize, width: usize },
    ReflectPad { top: usize, bottom: usize, left: usize, right: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    LayerNorm { eps: f64 },
    BatchNorm { eps: f64 },
    Gelu,
    Relu,
    Softmax,
    Sum,
    MeanAxis { axis: usize },
    AdaptiveAvgPool2d { height: usize, width: usize },
    MaxPool2d { kernel: usize, stride: usize },
    Dropout { p: f64, seed: u64 },
    CrossEntropy { ignore_index: u8 },
}

impl Op {
    pub fn id(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::BroadcastTo => "broadcast_to",
            Op::BiasAdd { .. } => "bias_add",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Bilinear { .. } => "bilinear_interpolate",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::MeanAxis { .. } => "mean",
            Op::AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Whether the primitive is a nonlinear function of its data input.
    pub fn is_nonlinear(&self) -> bool {
        matches!(
            self,
            Op::Mul
                | Op::LayerNorm { .. }
                | Op::BatchNorm { .. }
                | Op::Gelu
                | Op::Relu
                | Op::Softmax
                | Op::MaxPool2d { .. }
                | Op::Dropout { .. }
                | Op::CrossEntropy { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Bool(bool),
}

pub type Attrs = BTreeMap<String, AttrValue>;

enum Saved<T> {
    None,
    Stats { mean: Vec<T>, rstd: Vec<T> },
    Mask(Vec<T>),
    Indices(Vec<usize>),
    Targets { targets: Arc<[u8]>, probs: Vec<T>, count: usize },
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. Only nodes that depend on a gradient-requiring leaf take part
/// in [`Graph::backward`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if it does not require grad or is unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

type Res = Result<Var, TensorError>;

fn arity(op: &'static str, inputs: &[Var], expected: usize) -> Result<(), TensorError> {
    if inputs.len() == expected {
        Ok(())
    } else {
        Err(TensorError::Arity { op, expected, got: inputs.len() })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Ops of all nodes in creation order.
    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes that would be visited by a backward pass.
    pub fn tape_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && n.op != Op::Leaf).count()
    }

    /// Total element count over all non-leaf node outputs.
    pub fn activation_elements(&self) -> usize {
        self.nodes.iter().filter(|n| n.op != Op::Leaf).map(|n| n.value.numel()).sum()
    }

    /// Batch statistics `(mean, biased variance)` saved by a batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(Vec<T>, Vec<T>)> {
        match &self.nodes[v.0].saved {
            Saved::Stats { mean, rstd } if matches!(self.nodes[v.0].op, Op::BatchNorm { .. }) => {
                let eps = match self.nodes[v.0].op {
                    Op::BatchNorm { eps } => T::from_f64_lossy(eps),
                    _ => unreachable!(),
                };
                let var = rstd.iter().map(|&r| T::one() / (r * r) - eps).collect();
                Some((mean.clone(), var))
            }
            _ => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>, saved: Saved<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn any_meta(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.is_meta())
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Res {
        let name = op.id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| mismatch(name, &[&sa, &sb], "not broadcastable"))?;
        let value = if self.any_meta(&[a, b]) {
            Tensor::meta(&out_shape)
        } else {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let out = if sa == sb {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ma = kernels::broadcast_index_map(&sa, &out_shape);
                let mb = kernels::broadcast_index_map(&sb, &out_shape);
                ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
            };
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(op, vec![a, b], value, Saved::None))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value, Saved::None)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64_lossy(factor);
        self.unary(Op::Scale(factor), x, move |v| v * c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(Op::Gelu, x, move |v| half * v * (T::one() + (v * inv_sqrt2).erf()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Inverted dropout with a mask drawn from `seed`. Rate 0 is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Res {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadAttr { op: "dropout".into(), attr: "p".into() });
        }
        let xv = self.value(x).clone();
        if xv.is_meta() {
            return Ok(self.push(Op::Dropout { p, seed }, vec![x], xv, Saved::None));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), out);
        Ok(self.push(Op::Dropout { p, seed }, vec![x], value, Saved::Mask(mask)))
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value, Saved::None))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Res {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(mismatch("permute", &[&shape, perm], "invalid permutation"));
        }
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&perm.iter().map(|&p| shape[p]).collect::<Vec<_>>())
        } else {
            let (s, d) = kernels::permute(&shape, self.value(x).data(), perm);
            Tensor::from_vec(s, d)
        };
        Ok(self.push(Op::Permute(perm.to_vec()), vec![x], value, Saved::None))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Res {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(mismatch("permute", &[self.shape(x)], "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Res {
        let sx = self.shape(x).to_vec();
        match kernels::broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(mismatch("broadcast_to", &[&sx, shape], "not broadcastable")),
        }
        let value = if self.any_meta(&[x]) {
            Tensor::meta(shape)
        } else {
            let d = self.value(x).data();
            let map = kernels::broadcast_index_map(&sx, shape);
            Tensor::from_vec(shape.to_vec(), map.iter().map(|&i| d[i]).collect())
        };
        Ok(self.push(Op::BroadcastTo, vec![x], value, Saved::None))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Res {
        let Some(&first) = xs.first() else {
            return Err(TensorError::Arity { op: "concat", expected: 1, got: 0 });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &[&base], format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(mismatch("concat", &shapes, "extents differ off the concat axis"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let value = if self.any_meta(xs) {
            Tensor::meta(&out_shape)
        } else {
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for &v in xs {
                    let len = self.shape(v)[axis] * inner;
                    out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), value, Saved::None))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Res {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(
                "slice",
                &[&shape],
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&out_shape)
        } else {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let d = self.value(x).data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::Slice { axis, start, len }, vec![x], value, Saved::None))
    }

    // ----- linear algebra --------------------------------------------------

    /// `a · b` (or `a · bᵀ`). `a` is `[..., m, k]` against a matrix `b`, or
    /// both are `[batch, ·, ·]` for a batched product.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb, transpose_b)?;
        let value = if self.any_meta(&[a, b]) {
            Tensor::meta(&plan.out_shape)
        } else {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let mut out = Vec::with_capacity(plan.out_shape.iter().product());
            for bi in 0..plan.batch {
                let ab = &da[bi * plan.m * plan.k..(bi + 1) * plan.m * plan.k];
                let bb = if plan.batched { &db[bi * plan.k * plan.n..(bi + 1) * plan.k * plan.n] } else { db };
                out.extend(kernels::gemm(plan.m, plan.k, plan.n, ab, bb, transpose_b));
            }
            Tensor::from_vec(plan.out_shape.clone(), out)
        };
        Ok(self.push(Op::Matmul { transpose_b }, vec![a, b], value, Saved::None))
    }

    /// Adds a vector along `axis` of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Res {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if axis >= sx.len() || sb != [sx[axis]] {
            return Err(mismatch("bias_add", &[&sx, &sb], format!("bias must match axis {axis}")));
        }
        let value = if self.any_meta(&[x, bias]) {
            Tensor::meta(&sx)
        } else {
            let inner: usize = sx[axis + 1..].iter().product();
            let c = sx[axis];
            let bd = self.value(bias).data();
            let out = self
                .value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bd[(i / inner) % c])
                .collect();
            Tensor::from_vec(sx, out)
        };
        Ok(self.push(Op::BiasAdd { axis }, vec![x, bias], value, Saved::None))
    }

    // ----- convolution -----------------------------------------------------

    /// Zero-padded 2-d convolution. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Res {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", &[&sx, &sw], "expected [N,C,H,W] and [O,C,kh,kw]"));
        }
        let g = Window::conv(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)
            .ok_or_else(|| mismatch("conv2d", &[&sx, &sw], "kernel larger than padded input"))?;
        let out_shape = vec![sx[0], sw[0], g.out_h, g.out_w];
        let value = if self.any_meta(&[x, w]) {
            Tensor::meta(&out_shape)
        } else {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            let plane = sx[1] * sx[2] * sx[3];
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for n in 0..sx[0] {
                let cols = kernels::im2col(&dx[n * plane..(n + 1) * plane], &g);
                out.extend(kernels::gemm(sw[0], g.rows(), g.cols(), dw, &cols, false));
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w], value, Saved::None))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// weight tensor. `x: [N,Ci,H,W]`, `w: [Ci,Co,kh,kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Res {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(mismatch("conv_transpose2d", &[&sx, &sw], "expected [N,Ci,H,W] and [Ci,Co,kh,kw]"));
        }
        let g = convt_window(&sx, &sw, stride, padding)
            .ok_or_else(|| mismatch("conv_transpose2d", &[&sx, &sw], "padding too large"))?;
        let out_shape = vec![sx[0], sw[1], g.h, g.w];
        let value = if self.any_meta(&[x, w]) {
            Tensor::meta(&out_shape)
        } else {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            let wt = kernels::transpose(sw[0], g.rows(), dw);
            let in_plane = sx[1] * sx[2] * sx[3];
            let out_plane = sw[1] * g.h * g.w;
            let mut out = vec![T::zero(); sx[0] * out_plane];
            for n in 0..sx[0] {
                let cols = kernels::gemm(g.rows(), sx[1], g.cols(), &wt, &dx[n * in_plane..(n + 1) * in_plane], false);
                kernels::col2im(&cols, &g, &mut out[n * out_plane..(n + 1) * out_plane]);
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::ConvTranspose2d { stride, padding }, vec![x, w], value, Saved::None))
    }

    // ----- resampling --------------------------------------------------------

    /// Half-pixel bilinear resize of the two trailing axes.
    pub fn bilinear(&mut self, x: Var, height: usize, width: usize) -> Res {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || height == 0 || width == 0 || sx[sx.len() - 1] == 0 || sx[sx.len() - 2] == 0 {
            return Err(mismatch("bilinear_interpolate", &[&sx], "needs non-empty spatial axes"));
        }
        let r = sx.len();
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let mut out_shape = sx.clone();
        out_shape[r - 2] = height;
        out_shape[r - 1] = width;
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&out_shape)
        } else {
            let ty = kernels::bilinear_taps(h, height);
            let tx = kernels::bilinear_taps(w, width);
            let d = self.value(x).data();
            let planes = d.len() / (h * w);
            let mut out = Vec::with_capacity(planes * height * width);
            for p in 0..planes {
                let src = &d[p * h * w..(p + 1) * h * w];
                for &(y0, y1, ly) in &ty {
                    let ly = T::from_f64_lossy(ly);
                    for &(x0, x1, lx) in &tx {
                        let lx = T::from_f64_lossy(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        out.push(top * (T::one() - ly) + bot * ly);
                    }
                }
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::Bilinear { height, width }, vec![x], value, Saved::None))
    }

    /// Reflection padding of the two trailing axes (edge not repeated).
    pub fn reflect_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Res {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        if r < 2 || top.max(bottom) >= sx[r - 2] || left.max(right) >= sx[r - 1] {
            return Err(mismatch("reflect_pad", &[&sx], "padding must be smaller than the extent"));
        }
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out_shape = sx.clone();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&out_shape)
        } else {
            let d = self.value(x).data();
            let planes = d.len() / (h * w);
            let mut out = Vec::with_capacity(planes * oh * ow);
            for p in 0..planes {
                for y in 0..oh {
                    let sy = kernels::reflect_index(y as isize - top as isize, h);
                    for xx in 0..ow {
                        let sxi = kernels::reflect_index(xx as isize - left as isize, w);
                        out.push(d[p * h * w + sy * w + sxi]);
                    }
                }
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::ReflectPad { top, bottom, left, right }, vec![x], value, Saved::None))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, height: usize, width: usize) -> Res {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        if r < 2 || height == 0 || width == 0 || height > sx[r - 2] || width > sx[r - 1] {
            return Err(mismatch("adaptive_avg_pool2d", &[&sx], format!("cannot pool to {height}x{width}")));
        }
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let mut out_shape = sx.clone();
        out_shape[r - 2] = height;
        out_shape[r - 1] = width;
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&out_shape)
        } else {
            let (by, bx) = (kernels::adaptive_bins(h, height), kernels::adaptive_bins(w, width));
            let d = self.value(x).data();
            let planes = d.len() / (h * w);
            let mut out = Vec::with_capacity(planes * height * width);
            for p in 0..planes {
                for &(y0, y1) in &by {
                    for &(x0, x1) in &bx {
                        let mut acc = T::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                acc += d[p * h * w + yy * w + xx];
                            }
                        }
                        out.push(acc / T::from_usize(((y1 - y0) * (x1 - x0)).max(1)).unwrap());
                    }
                }
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::AdaptiveAvgPool2d { height, width }, vec![x], value, Saved::None))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Res {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        if r < 2 || kernel == 0 || stride == 0 || kernel > sx[r - 2] || kernel > sx[r - 1] {
            return Err(mismatch("max_pool2d", &[&sx], format!("kernel {kernel} stride {stride}")));
        }
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out_shape = sx.clone();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        if self.any_meta(&[x]) {
            return Ok(self.push(Op::MaxPool2d { kernel, stride }, vec![x], Tensor::meta(&out_shape), Saved::None));
        }
        let d = self.value(x).data();
        let planes = d.len() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut idx = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    idx.push(best);
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out);
        Ok(self.push(Op::MaxPool2d { kernel, stride }, vec![x], value, Saved::Indices(idx)))
    }

    // ----- normalization -------------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                &[&sx, self.shape(gamma), self.shape(beta)],
                "affine parameters must match the last axis",
            ));
        }
        if self.any_meta(&[x, gamma, beta]) {
            return Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], Tensor::meta(&sx), Saved::None));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let dn = T::from_usize(d).unwrap();
        let e = T::from_f64_lossy(eps);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
            let rs = T::one() / (var + e).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - m) * rs * gd[j] + bd[j]);
            }
            mean.push(m);
            rstd.push(rs);
        }
        let value = Tensor::from_vec(sx, out);
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value, Saved::Stats { mean, rstd }))
    }

    /// Batch normalization over every axis except axis 1, using the batch's
    /// own statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(mismatch(
                "batch_norm",
                &[&sx, self.shape(gamma), self.shape(beta)],
                "affine parameters must match axis 1",
            ));
        }
        if self.any_meta(&[x, gamma, beta]) {
            return Ok(self.push(Op::BatchNorm { eps }, vec![x, gamma, beta], Tensor::meta(&sx), Saved::None));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let count = T::from_usize(n * inner).unwrap();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let e = T::from_f64_lossy(eps);
        let mut mean = vec![T::zero(); c];
        let mut rstd = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    s += v;
                }
            }
            let m = s / count;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    sq += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            rstd[ch] = T::one() / (sq / count + e).sqrt();
        }
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * rstd[ch] * gd[ch] + bd[ch]
            })
            .collect();
        let value = Tensor::from_vec(sx, out);
        Ok(self.push(Op::BatchNorm { eps }, vec![x, gamma, beta], value, Saved::Stats { mean, rstd }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Res {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| mismatch("softmax", &[&sx], "scalar input"))?;
        if self.any_meta(&[x]) {
            return Ok(self.push(Op::Softmax, vec![x], Tensor::meta(&sx), Saved::None));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= s;
            }
        }
        let value = Tensor::from_vec(sx, out);
        Ok(self.push(Op::Softmax, vec![x], value, Saved::None))
    }

    // ----- reductions ----------------------------------------------------------

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&[])
        } else {
            Tensor::scalar(self.value(x).data().iter().copied().sum())
        };
        self.push(Op::Sum, vec![x], value, Saved::None)
    }

    /// Mean over one axis; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Res {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(mismatch("mean", &[&sx], format!("axis {axis}")));
        }
        let mut out_shape = sx.clone();
        out_shape.remove(axis);
        let value = if self.any_meta(&[x]) {
            Tensor::meta(&out_shape)
        } else {
            let outer: usize = sx[..axis].iter().product();
            let inner: usize = sx[axis + 1..].iter().product();
            let a = sx[axis];
            let an = T::from_usize(a).unwrap();
            let d = self.value(x).data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..a {
                    let src = &d[(o * a + k) * inner..(o * a + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            for v in &mut out {
                *v /= an;
            }
            Tensor::from_vec(out_shape, out)
        };
        Ok(self.push(Op::MeanAxis { axis }, vec![x], value, Saved::None))
    }

    /// Mean pixel-wise cross-entropy of `logits: [N,K,...]` against class
    /// ids; pixels labelled `ignore_index` contribute neither loss nor
    /// gradient. A batch with no labelled pixel has loss 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], ignore_index: u8) -> Res {
        let sl = self.shape(logits).to_vec();
        if sl.len() < 2 {
            return Err(mismatch("cross_entropy", &[&sl], "logits need a class axis"));
        }
        let (n, k) = (sl[0], sl[1]);
        let inner: usize = sl[2..].iter().product();
        if targets.len() != n * inner {
            return Err(mismatch(
                "cross_entropy",
                &[&sl, &[targets.len()]],
                "target count must equal N × spatial extent",
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t as usize >= k) {
            return Err(mismatch("cross_entropy", &[&sl], format!("class id {bad} out of range")));
        }
        let op = Op::CrossEntropy { ignore_index };
        if self.any_meta(&[logits]) {
            return Ok(self.push(op, vec![logits], Tensor::meta(&[]), Saved::None));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            for s in 0..inner {
                let at = |c: usize| (b * k + c) * inner + s;
                let m = (0..k).map(|c| ld[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (ld[at(c)] - m).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[at(c)] /= z;
                }
                let t = targets[b * inner + s];
                if t != ignore_index {
                    total += z.ln() + m - ld[at(t as usize)];
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        let saved = Saved::Targets { targets: targets.into(), probs, count };
        Ok(self.push(op, vec![logits], Tensor::scalar(loss), saved))
    }

    // ----- generic dispatch ------------------------------------------------------

    /// Applies a primitive by identifier. `cross_entropy` takes its class
    /// ids as a second input tensor of integral values.
    pub fn apply(&mut self, op_id: &str, inputs: &[Var], attrs: &Attrs) -> Res {
        let int = |name: &str| -> Result<usize, TensorError> {
            match attrs.get(name) {
                Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
                _ => Err(TensorError::BadAttr { op: op_id.into(), attr: name.into() }),
            }
        };
        let float = |name: &str| -> Result<f64, TensorError> {
            match attrs.get(name) {
                Some(AttrValue::Float(v)) => Ok(*v),
                Some(AttrValue::Int(v)) => Ok(*v as f64),
                _ => Err(TensorError::BadAttr { op: op_id.into(), attr: name.into() }),
            }
        };
        let flag = |name: &str| -> bool { matches!(attrs.get(name), Some(AttrValue::Bool(true))) };
        let ints = |name: &str| -> Result<Vec<usize>, TensorError> {
            match attrs.get(name) {
                Some(AttrValue::Ints(v)) if v.iter().all(|&i| i >= 0) => Ok(v.iter().map(|&i| i as usize).collect()),
                _ => Err(TensorError::BadAttr { op: op_id.into(), attr: name.into() }),
            }
        };
        let one = |name: &'static str| arity(name, inputs, 1).map(|_| inputs[0]);
        match op_id {
            "add" => arity("add", inputs, 2).and_then(|_| self.add(inputs[0], inputs[1])),
            "sub" => arity("sub", inputs, 2).and_then(|_| self.sub(inputs[0], inputs[1])),
            "mul" => arity("mul", inputs, 2).and_then(|_| self.mul(inputs[0], inputs[1])),
            "scale" => {
                let x = one("scale")?;
                let f = float("factor")?;
                Ok(self.scale(x, f))
            }
            "matmul" => arity("matmul", inputs, 2).and_then(|_| self.matmul(inputs[0], inputs[1], flag("transpose_b"))),
            "reshape" => {
                let x = one("reshape")?;
                self.reshape(x, &ints("shape")?)
            }
            "permute" => {
                let x = one("permute")?;
                self.permute(x, &ints("perm")?)
            }
            "broadcast_to" => {
                let x = one("broadcast_to")?;
                self.broadcast_to(x, &ints("shape")?)
            }
            "bias_add" => arity("bias_add", inputs, 2).and_then(|_| self.bias_add(inputs[0], inputs[1], int("axis")?)),
            "conv2d" => arity("conv2d", inputs, 2)
                .and_then(|_| self.conv2d(inputs[0], inputs[1], int("stride")?, int("padding")?)),
            "conv_transpose2d" => arity("conv_transpose2d", inputs, 2)
                .and_then(|_| self.conv_transpose2d(inputs[0], inputs[1], int("stride")?, int("padding")?)),
            "bilinear_interpolate" => {
                let x = one("bilinear_interpolate")?;
                self.bilinear(x, int("height")?, int("width")?)
            }
            "reflect_pad" => {
                let x = one("reflect_pad")?;
                self.reflect_pad(x, int("top")?, int("bottom")?, int("left")?, int("right")?)
            }
            "concat" => self.concat(inputs, int("axis")?),
            "slice" => {
                let x = one("slice")?;
                self.slice(x, int("axis")?, int("start")?, int("len")?)
            }
            "layer_norm" => arity("layer_norm", inputs, 3)
                .and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], float("eps")?)),
            "batch_norm" => arity("batch_norm", inputs, 3)
                .and_then(|_| self.batch_norm(inputs[0], inputs[1], inputs[2], float("eps")?)),
            "gelu" => one("gelu").map(|x| self.gelu(x)),
            "relu" => one("relu").map(|x| self.relu(x)),
            "softmax" => {
                let x = one("softmax")?;
                self.softmax(x)
            }
            "sum" => one("sum").map(|x| self.sum(x)),
            "mean" => {
                let x = one("mean")?;
                self.mean_axis(x, int("axis")?)
            }
            "adaptive_avg_pool2d" => {
                let x = one("adaptive_avg_pool2d")?;
                self.adaptive_avg_pool2d(x, int("height")?, int("width")?)
            }
            "max_pool2d" => {
                let x = one("max_pool2d")?;
                self.max_pool2d(x, int("kernel")?, int("stride")?)
            }
            "dropout" => {
                let x = one("dropout")?;
                self.dropout(x, float("p")?, int("seed")? as u64)
            }
            "cross_entropy" => {
                arity("cross_entropy", inputs, 2)?;
                let ignore = attrs.get("ignore_index").map_or(Ok(255), |_| int("ignore_index"))?;
                let targets: Vec<u8> = self.value(inputs[1]).data().iter().map(|v| v.as_f64() as u8).collect();
                self.cross_entropy(inputs[0], &targets, ignore.min(255) as u8)
            }
            other => Err(TensorError::UnknownPrimitive(other.to_string())),
        }
    }

    // ----- backward ----------------------------------------------------------------

    /// Accumulates gradients of the scalar `root` into every reachable leaf
    /// that requires grad. Each tape node is visited exactly once, in
    /// reverse recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        if rv.is_meta() {
            return Err(TensorError::MetaBackward);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.vjp(i, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                (n.op == Op::Leaf && n.requires_grad).then(|| {
                    let shape = n.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Tensor::from_vec(shape, data)
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize, k: usize) -> bool {
        self.nodes[self.nodes[i].inputs[k].0].requires_grad
    }

    fn input_value(&self, i: usize, k: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[i].inputs[k].0].value
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let x = |k: usize| self.input_value(i, k);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add | Op::Sub => {
                let ga = self.wants(i, 0).then(|| reduce_to(g, x(0).shape(), out_shape));
                let gb = self.wants(i, 1).then(|| {
                    let mut r = reduce_to(g, x(1).shape(), out_shape);
                    if node.op == Op::Sub {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (x(0), x(1));
                let am = kernels::broadcast_index_map(a.shape(), out_shape);
                let bm = kernels::broadcast_index_map(b.shape(), out_shape);
                let ga = self.wants(i, 0).then(|| {
                    let mut r = vec![T::zero(); a.numel()];
                    for (j, &gv) in g.iter().enumerate() {
                        r[am[j]] += gv * b.data()[bm[j]];
                    }
                    r
                });
                let gb = self.wants(i, 1).then(|| {
                    let mut r = vec![T::zero(); b.numel()];
                    for (j, &gv) in g.iter().enumerate() {
                        r[bm[j]] += gv * a.data()[am[j]];
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Scale(f) => {
                let c = T::from_f64_lossy(*f);
                vec![Some(g.iter().map(|&v| v * c).collect())]
            }
            Op::Matmul { transpose_b } => self.matmul_vjp(i, g, *transpose_b),
            Op::Dropout { .. } => match &node.saved {
                Saved::Mask(mask) => vec![Some(g.iter().zip(mask).map(|(&a, &m)| a * m).collect())],
                _ => vec![Some(g.to_vec())],
            },
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                vec![Some(kernels::permute(out_shape, g, &inv).1)]
            }
            Op::BroadcastTo => vec![Some(reduce_to(g, x(0).shape(), out_shape))],
            Op::BiasAdd { axis } => {
                let c = out_shape[*axis];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let gb = self.wants(i, 1).then(|| {
                    let mut r = vec![T::zero(); c];
                    for (j, &v) in g.iter().enumerate() {
                        r[(j / inner) % c] += v;
                    }
                    r
                });
                vec![Some(g.to_vec()), gb]
            }
            Op::Conv2d { stride, padding } => self.conv_vjp(i, g, *stride, *padding),
            Op::ConvTranspose2d { stride, padding } => self.convt_vjp(i, g, *stride, *padding),
            Op::Bilinear { height, width } => {
                let sx = x(0).shape();
                let r = sx.len();
                let (h, w) = (sx[r - 2], sx[r - 1]);
                let ty = kernels::bilinear_taps(h, *height);
                let tx = kernels::bilinear_taps(w, *width);
                let planes = x(0).numel() / (h * w);
                let mut out = vec![T::zero(); x(0).numel()];
                let mut it = g.iter();
                for p in 0..planes {
                    let dst = &mut out[p * h * w..(p + 1) * h * w];
                    for &(y0, y1, ly) in &ty {
                        let ly = T::from_f64_lossy(ly);
                        for &(x0, x1, lx) in &tx {
                            let lx = T::from_f64_lossy(lx);
                            let gv = *it.next().unwrap();
                            dst[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                            dst[y0 * w + x1] += gv * (T::one() - ly) * lx;
                            dst[y1 * w + x0] += gv * ly * (T::one() - lx);
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::ReflectPad { top, left, .. } => {
                let sx = x(0).shape();
                let r = sx.len();
                let (h, w) = (sx[r - 2], sx[r - 1]);
                let (oh, ow) = (out_shape[r - 2], out_shape[r - 1]);
                let planes = x(0).numel() / (h * w);
                let mut out = vec![T::zero(); x(0).numel()];
                for p in 0..planes {
                    for y in 0..oh {
                        let sy = kernels::reflect_index(y as isize - *top as isize, h);
                        for xx in 0..ow {
                            let sxi = kernels::reflect_index(xx as isize - *left as isize, w);
                            out[p * h * w + sy * w + sxi] += g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::Concat { axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let len = self.nodes[v.0].value.shape()[*axis] * inner;
                        let part = self.nodes[v.0].requires_grad.then(|| {
                            let mut r = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                r.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                            }
                            r
                        });
                        offset += len;
                        part
                    })
                    .collect()
            }
            Op::Slice { axis, start, len } => {
                let sx = x(0).shape();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let mut out = vec![T::zero(); x(0).numel()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(out)]
            }
            Op::LayerNorm { .. } => self.layer_norm_vjp(i, g),
            Op::BatchNorm { .. } => self.batch_norm_vjp(i, g),
            Op::Gelu => {
                let half = T::from_f64_lossy(0.5);
                let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
                let d = x(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = (-(v * v) * half).exp() * inv_sqrt2pi;
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                vec![Some(d)]
            }
            Op::Relu => vec![Some(
                x(0).data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect(),
            )],
            Op::Softmax => {
                let d = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![Some(out)]
            }
            Op::Sum => vec![Some(vec![g[0]; x(0).numel()])],
            Op::MeanAxis { axis } => {
                let sx = x(0).shape();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let a = sx[*axis];
                let an = T::from_usize(a).unwrap();
                let mut out = Vec::with_capacity(x(0).numel());
                for o in 0..outer {
                    for _ in 0..a {
                        out.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v / an));
                    }
                }
                vec![Some(out)]
            }
            Op::AdaptiveAvgPool2d { height, width } => {
                let sx = x(0).shape();
                let r = sx.len();
                let (h, w) = (sx[r - 2], sx[r - 1]);
                let (by, bx) = (kernels::adaptive_bins(h, *height), kernels::adaptive_bins(w, *width));
                let planes = x(0).numel() / (h * w);
                let mut out = vec![T::zero(); x(0).numel()];
                let mut it = g.iter();
                for p in 0..planes {
                    for &(y0, y1) in &by {
                        for &(x0, x1) in &bx {
                            let gv = *it.next().unwrap() / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    out[p * h * w + yy * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::MaxPool2d { .. } => {
                let mut out = vec![T::zero(); x(0).numel()];
                if let Saved::Indices(idx) = &node.saved {
                    for (&j, &gv) in idx.iter().zip(g) {
                        out[j] += gv;
                    }
                }
                vec![Some(out)]
            }
            Op::CrossEntropy { ignore_index } => {
                let Saved::Targets { targets, probs, count } = &node.saved else {
                    return vec![None];
                };
                let sl = x(0).shape();
                let (n, k) = (sl[0], sl[1]);
                let inner: usize = sl[2..].iter().product();
                let mut out = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    for b in 0..n {
                        for s in 0..inner {
                            let t = targets[b * inner + s];
                            if t == *ignore_index {
                                continue;
                            }
                            for c in 0..k {
                                let at = (b * k + c) * inner + s;
                                let y = if c == t as usize { T::one() } else { T::zero() };
                                out[at] = (probs[at] - y) * scale;
                            }
                        }
                    }
                }
                vec![Some(out)]
            }
        }
    }

    fn matmul_vjp(&self, i: usize, g: &[T], trans: bool) -> Vec<Option<Vec<T>>> {
        let (a, b) = (self.input_value(i, 0), self.input_value(i, 1));
        let plan = MatmulPlan::new(a.shape(), b.shape(), trans).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let want_a = self.wants(i, 0);
        let want_b = self.wants(i, 1);
        let mut ga = want_a.then(|| Vec::with_capacity(a.numel()));
        let mut gb = want_b.then(|| vec![T::zero(); b.numel()]);
        let bsz = k * n;
        for bi in 0..plan.batch {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            let av = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bv = if plan.batched { &b.data()[bi * bsz..(bi + 1) * bsz] } else { b.data() };
            if let Some(ga) = ga.as_mut() {
                // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                ga.extend(kernels::gemm(m, n, k, gs, bv, !trans));
            }
            if let Some(gb) = gb.as_mut() {
                let part = if trans {
                    kernels::gemm(n, m, k, &kernels::transpose(m, n, gs), av, false)
                } else {
                    kernels::gemm(k, m, n, &kernels::transpose(m, k, av), gs, false)
                };
                let dst = if plan.batched { &mut gb[bi * bsz..(bi + 1) * bsz] } else { &mut gb[..] };
                dst.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
            }
        }
        vec![ga, gb]
    }

    fn conv_vjp(&self, i: usize, g: &[T], stride: usize, padding: usize) -> Vec<Option<Vec<T>>> {
        let (x, w) = (self.input_value(i, 0), self.input_value(i, 1));
        let (sx, sw) = (x.shape(), w.shape());
        let geo = Window::conv(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding).expect("validated in forward");
        let plane = sx[1] * sx[2] * sx[3];
        let out_plane = sw[0] * geo.cols();
        let mut gx = self.wants(i, 0).then(|| vec![T::zero(); x.numel()]);
        let mut gw = self.wants(i, 1).then(|| vec![T::zero(); w.numel()]);
        let wt = gx.as_ref().map(|_| kernels::transpose(sw[0], geo.rows(), w.data()));
        for n in 0..sx[0] {
            let gn = &g[n * out_plane..(n + 1) * out_plane];
            if let Some(gw) = gw.as_mut() {
                let cols = kernels::im2col(&x.data()[n * plane..(n + 1) * plane], &geo);
                let part = kernels::gemm(sw[0], geo.cols(), geo.rows(), gn, &cols, true);
                gw.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
            }
            if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
                let dcols = kernels::gemm(geo.rows(), sw[0], geo.cols(), wt, gn, false);
                kernels::col2im(&dcols, &geo, &mut gx[n * plane..(n + 1) * plane]);
            }
        }
        vec![gx, gw]
    }

    fn convt_vjp(&self, i: usize, g: &[T], stride: usize, padding: usize) -> Vec<Option<Vec<T>>> {
        let (x, w) = (self.input_value(i, 0), self.input_value(i, 1));
        let (sx, sw) = (x.shape(), w.shape());
        let geo = convt_window(sx, sw, stride, padding).expect("validated in forward");
        let in_plane = sx[1] * sx[2] * sx[3];
        let out_plane = sw[1] * geo.h * geo.w;
        let mut gx = self.wants(i, 0).then(|| Vec::with_capacity(x.numel()));
        let mut gw = self.wants(i, 1).then(|| vec![T::zero(); w.numel()]);
        for n in 0..sx[0] {
            let dcols = kernels::im2col(&g[n * out_plane..(n + 1) * out_plane], &geo);
            if let Some(gx) = gx.as_mut() {
                gx.extend(kernels::gemm(sx[1], geo.rows(), geo.cols(), w.data(), &dcols, false));
            }
            if let Some(gw) = gw.as_mut() {
                let xn = &x.data()[n * in_plane..(n + 1) * in_plane];
                let part = kernels::gemm(sx[1], geo.cols(), geo.rows(), xn, &dcols, true);
                gw.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
            }
        }
        vec![gx, gw]
    }

    fn layer_norm_vjp(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let Saved::Stats { mean, rstd } = &node.saved else { return vec![None, None, None] };
        let (x, gamma) = (self.input_value(i, 0), self.input_value(i, 1));
        let d = gamma.numel();
        let dn = T::from_usize(d).unwrap();
        let mut gx = Vec::with_capacity(x.numel());
        let mut gg = vec![T::zero(); d];
        let mut gb = vec![T::zero(); d];
        for (r, (xr, gr)) in x.data().chunks(d).zip(g.chunks(d)).enumerate() {
            let (m, rs) = (mean[r], rstd[r]);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                let xh = (xr[j] - m) * rs;
                let dxh = gr[j] * gamma.data()[j];
                gg[j] += gr[j] * xh;
                gb[j] += gr[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            for j in 0..d {
                let xh = (xr[j] - m) * rs;
                let dxh = gr[j] * gamma.data()[j];
                gx.push(rs / dn * (dn * dxh - sum_dxh - xh * sum_dxh_xh));
            }
        }
        vec![
            self.wants(i, 0).then_some(gx),
            self.wants(i, 1).then_some(gg),
            self.wants(i, 2).then_some(gb),
        ]
    }

    fn batch_norm_vjp(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let Saved::Stats { mean, rstd } = &node.saved else { return vec![None, None, None] };
        let (x, gamma) = (self.input_value(i, 0), self.input_value(i, 1));
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = T::from_usize(n * inner).unwrap();
        let xd = x.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_g_xh = vec![T::zero(); c];
        for (j, (&xv, &gv)) in xd.iter().zip(g).enumerate() {
            let ch = (j / inner) % c;
            sum_g[ch] += gv;
            sum_g_xh[ch] += gv * (xv - mean[ch]) * rstd[ch];
        }
        let gx: Vec<T> = xd
            .iter()
            .zip(g)
            .enumerate()
            .map(|(j, (&xv, &gv))| {
                let ch = (j / inner) % c;
                let xh = (xv - mean[ch]) * rstd[ch];
                gamma.data()[ch] * rstd[ch] / count * (count * gv - sum_g[ch] - xh * sum_g_xh[ch])
            })
            .collect();
        vec![
            self.wants(i, 0).then_some(gx),
            self.wants(i, 1).then_some(sum_g_xh),
            self.wants(i, 2).then_some(sum_g),
        ]
    }
}

fn convt_window(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Option<Window> {
    let full = (sx[2] - 1) * stride + sw[2];
    let fullw = (sx[3] - 1) * stride + sw[3];
    if sx[2] == 0 || sx[3] == 0 || full <= 2 * padding || fullw <= 2 * padding {
        return None;
    }
    let g = Window::conv(sw[1], full - 2 * padding, fullw - 2 * padding, sw[2], sw[3], stride, padding)?;
    (g.out_h == sx[2] && g.out_w == sx[3]).then_some(g)
}

fn reduce_to<T: Real>(g: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if shape == out_shape {
        return g.to_vec();
    }
    let map = kernels::broadcast_index_map(shape, out_shape);
    let mut r = vec![T::zero(); shape.iter().product()];
    for (&j, &v) in map.iter().zip(g) {
        r[j] += v;
    }
    r
}

struct MatmulPlan {
    batch: usize,
    batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize], trans: bool) -> Result<Self, TensorError> {
        let err = |d: &str| mismatch("matmul", &[sa, sb], d.to_string());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err("operands need rank >= 2"));
        }
        let (bm, bn) = if trans { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        let k = sa[sa.len() - 1];
        if bm != k {
            return Err(err("inner dimensions differ"));
        }
        if sb.len() == 2 {
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out_shape = sa.to_vec();
            *out_shape.last_mut().unwrap() = bn;
            return Ok(Self { batch: 1, batched: false, m, k, n: bn, out_shape });
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err("batched matmul needs [B,m,k] x [B,k,n]"));
        }
        Ok(Self { batch: sa[0], batched: true, m: sa[1], k, n: bn, out_shape: vec![sa[0], sa[1], bn] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn gelu_fixes_origin() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let x = g.constant(t(&[3, 4], &xs));
        let i = g.constant(t(&[4, 4], &eye));
        let y = g.matmul(x, i, false).unwrap();
        assert_eq!(g.value(y).data(), &xs[..]);
    }

    #[test]
    fn conv_center_sums_receptive_field() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(t(&[1, 2], &[0.0, 0.0]), true);
        let loss = g.cross_entropy(logits, &[1], 255).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(logits).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn ignored_pixels_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(t(&[1, 2, 2], &[1.0, -1.0, 0.5, 2.0]), true);
        let loss = g.cross_entropy(logits, &[0, 255], 255).unwrap();
        let grads = g.backward(loss).unwrap();
        let gd = grads.get(logits).unwrap().data();
        assert_eq!(gd[1], 0.0);
        assert_eq!(gd[3], 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn frozen_leaves_stay_off_the_tape() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let y = g.mul(w, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.tape_len(), 2);
    }

    #[test]
    fn shared_input_visited_once_with_accumulation() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]), true);
        let a = g.scale(x, 2.0);
        let b = g.add(a, x).unwrap();
        let c = g.mul(b, x).unwrap();
        let s = g.sum(c);
        // s = 3x², ds/dx = 6x = 18
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[18.0]);
    }

    #[test]
    fn unknown_and_malformed_primitives_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(
            g.apply("fft", &[x], &Attrs::new()),
            Err(TensorError::UnknownPrimitive(_))
        ));
        assert!(matches!(g.apply("conv2d", &[x, x], &Attrs::new()), Err(TensorError::BadAttr { .. })));
        let y = g.constant(Tensor::ones(&[3, 2]));
        let err = g.apply("matmul", &[x, y], &Attrs::new()).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let x = g.constant(t(&[1, 4, 5], &data));
        let p = g.reflect_pad(x, 2, 1, 3, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 7, 10]);
        let rows = g.slice(p, 1, 2, 4).unwrap();
        let crop = g.slice(rows, 2, 3, 5).unwrap();
        assert_eq!(g.value(crop).data(), &data[..]);
    }

    #[test]
    fn meta_forward_tracks_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::meta(&[2, 3, 16, 16]));
        let w = g.constant(Tensor::meta(&[8, 3, 4, 4]));
        let y = g.conv2d(x, w, 4, 0).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 4, 4]);
        assert!(g.value(y).is_meta());
        assert_eq!(g.activation_elements(), 2 * 8 * 16);
    }

    #[test]
    fn bilinear_identity_when_size_unchanged() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let x = g.constant(t(&[1, 3, 4], &data));
        let y = g.bilinear(x, 3, 4).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }
}
