//! Gradient-check catalogue: every differentiable primitive, reached through
//! `Graph::apply`, with randomized shapes and values.

use geopeft::tensor::{grad_check, AttrValue, Attrs, Graph, Real, ScalarFn, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One primitive application, differentiated with respect to input `wrt`.
/// The loss is `Σ out ⊙ r` for a fixed random `r`, so every output element
/// contributes with a distinct weight.
#[derive(Clone, Debug)]
pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub attrs: Attrs,
    pub wrt: usize,
    pub weights: Vec<f64>,
}

impl ScalarFn for Case {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, (shape, data))| {
                if i == self.wrt {
                    x
                } else {
                    g.constant(Tensor::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap())
                }
            })
            .collect();
        let out = g.apply(self.op, &vars, &self.attrs)?;
        if g.shape(out).is_empty() {
            return Ok(out);
        }
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let r = g.constant(Tensor::new(&shape, self.weights[..n].iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap());
        let y = g.mul(out, r)?;
        Ok(g.sum(y))
    }
}

impl Case {
    pub fn point<T: Real>(&self) -> Tensor<T> {
        let (shape, data) = &self.inputs[self.wrt];
        Tensor::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap()
    }

    pub fn check<T: Real>(&self) -> f64 {
        grad_check(self, &self.point::<T>(), 1e-5).unwrap_or_else(|e| panic!("{}: {e}", self.op)).max_rel_error
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn ints(v: &[usize]) -> AttrValue {
    AttrValue::Ints(v.iter().map(|&x| x as i64).collect())
}

fn attrs(pairs: &[(&str, AttrValue)]) -> Attrs {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn int(v: usize) -> AttrValue {
    AttrValue::Int(v as i64)
}

/// `(primitive, number of differentiable inputs)`.
pub const PRIMITIVES: [(&str, usize); 26] = [
    ("add", 2),
    ("sub", 2),
    ("mul", 2),
    ("scale", 1),
    ("matmul", 2),
    ("reshape", 1),
    ("permute", 1),
    ("broadcast_to", 1),
    ("bias_add", 2),
    ("conv2d", 2),
    ("conv_transpose2d", 2),
    ("bilinear_interpolate", 1),
    ("reflect_pad", 1),
    ("concat", 2),
    ("slice", 1),
    ("layer_norm", 3),
    ("batch_norm", 3),
    ("gelu", 1),
    ("relu", 1),
    ("softmax", 1),
    ("sum", 1),
    ("mean", 1),
    ("adaptive_avg_pool2d", 1),
    ("max_pool2d", 1),
    ("dropout", 1),
    ("cross_entropy", 1),
];

/// A random instance of `op` differentiated with respect to input `wrt`.
pub fn instance(op: &'static str, wrt: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, c, h, w) = (d(&mut rng, 1, 2), d(&mut rng, 1, 3), d(&mut rng, 2, 5), d(&mut rng, 2, 5));
    let nchw = [b, c, h, w];
    let mut inputs = Vec::new();
    let mut a = Attrs::new();
    match op {
        "add" | "sub" | "mul" => {
            inputs.push(uniform(&mut rng, &[b, c, h]));
            // second operand broadcasts along the leading axis half the time
            let lead = if rng.random_bool(0.5) { 1 } else { b };
            inputs.push(uniform(&mut rng, &[lead, c, h]));
        }
        "scale" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("factor", AttrValue::Float(rng.random_range(-2.0..2.0)))]);
        }
        "matmul" => {
            let (m, k, n) = (d(&mut rng, 1, 4), d(&mut rng, 1, 4), d(&mut rng, 1, 4));
            let trans = rng.random_bool(0.5);
            let batched = rng.random_bool(0.5);
            let bshape = if trans { vec![n, k] } else { vec![k, n] };
            if batched {
                inputs.push(uniform(&mut rng, &[b, m, k]));
                inputs.push(uniform(&mut rng, &[&[b][..], &bshape].concat()));
            } else {
                inputs.push(uniform(&mut rng, &[b, m, k]));
                inputs.push(uniform(&mut rng, &bshape));
            }
            a = attrs(&[("transpose_b", AttrValue::Bool(trans))]);
        }
        "reshape" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("shape", ints(&[b * c, h * w]))]);
        }
        "permute" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("perm", ints(&[0, 2, 3, 1]))]);
        }
        "broadcast_to" => {
            inputs.push(uniform(&mut rng, &[1, c, 1]));
            a = attrs(&[("shape", ints(&[b, c, h]))]);
        }
        "bias_add" => {
            inputs.push(uniform(&mut rng, &nchw));
            inputs.push(uniform(&mut rng, &[c]));
            a = attrs(&[("axis", int(1))]);
        }
        "conv2d" => {
            let k = d(&mut rng, 1, 3);
            let (h, w) = (h.max(k), w.max(k));
            let co = d(&mut rng, 1, 3);
            inputs.push(uniform(&mut rng, &[b, c, h, w]));
            inputs.push(uniform(&mut rng, &[co, c, k, k]));
            a = attrs(&[("stride", int(d(&mut rng, 1, 2))), ("padding", int(d(&mut rng, 0, k / 2)))]);
        }
        "conv_transpose2d" => {
            let k = d(&mut rng, 1, 3);
            let co = d(&mut rng, 1, 3);
            inputs.push(uniform(&mut rng, &nchw));
            inputs.push(uniform(&mut rng, &[c, co, k, k]));
            let pad = if k > 1 { d(&mut rng, 0, (k - 1) / 2) } else { 0 };
            a = attrs(&[("stride", int(d(&mut rng, 1, 2))), ("padding", int(pad))]);
        }
        "bilinear_interpolate" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("height", int(d(&mut rng, 1, 7))), ("width", int(d(&mut rng, 1, 7)))]);
        }
        "reflect_pad" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[
                ("top", int(d(&mut rng, 0, h - 1))),
                ("bottom", int(d(&mut rng, 0, h - 1))),
                ("left", int(d(&mut rng, 0, w - 1))),
                ("right", int(d(&mut rng, 0, w - 1))),
            ]);
        }
        "concat" => {
            inputs.push(uniform(&mut rng, &nchw));
            let c2 = d(&mut rng, 1, 3);
            inputs.push(uniform(&mut rng, &[b, c2, h, w]));
            a = attrs(&[("axis", int(1))]);
        }
        "slice" => {
            inputs.push(uniform(&mut rng, &nchw));
            let start = d(&mut rng, 0, h - 1);
            a = attrs(&[("axis", int(2)), ("start", int(start)), ("len", int(d(&mut rng, 1, h - start)))]);
        }
        "layer_norm" => {
            let n = d(&mut rng, 2, 6);
            inputs.push(uniform(&mut rng, &[b, h, n]));
            inputs.push(uniform(&mut rng, &[n]));
            inputs.push(uniform(&mut rng, &[n]));
            a = attrs(&[("eps", AttrValue::Float(1e-5))]);
        }
        "batch_norm" => {
            inputs.push(uniform(&mut rng, &nchw));
            inputs.push(uniform(&mut rng, &[c]));
            inputs.push(uniform(&mut rng, &[c]));
            a = attrs(&[("eps", AttrValue::Float(1e-5))]);
        }
        "gelu" | "relu" | "softmax" | "sum" => inputs.push(uniform(&mut rng, &nchw)),
        "mean" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("axis", int(d(&mut rng, 0, 3)))]);
        }
        "adaptive_avg_pool2d" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("height", int(d(&mut rng, 1, h))), ("width", int(d(&mut rng, 1, w)))]);
        }
        "max_pool2d" => {
            inputs.push(uniform(&mut rng, &nchw));
            let k = d(&mut rng, 1, h.min(w));
            a = attrs(&[("kernel", int(k)), ("stride", int(d(&mut rng, 1, k)))]);
        }
        "dropout" => {
            inputs.push(uniform(&mut rng, &nchw));
            a = attrs(&[("p", AttrValue::Float(0.3)), ("seed", int(d(&mut rng, 0, 1000)))]);
        }
        "cross_entropy" => {
            let k = d(&mut rng, 2, 4);
            inputs.push(uniform(&mut rng, &[b, k, h, w]));
            // class ids, with some ignored pixels
            let t: Vec<f64> = (0..b * h * w).map(|_| if rng.random_bool(0.2) { 255.0 } else { rng.random_range(0..k) as f64 }).collect();
            inputs.push((vec![b, h, w], t));
        }
        other => panic!("no generator for {other}"),
    }
    let weights = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    Case { op, inputs, attrs: a, wrt, weights }
}

/// Worst relative error over `instances` random cases of each
/// primitive/input pair, at precision `T`.
pub fn worst_errors<T: Real>(instances: u64) -> Vec<(&'static str, usize, f64)> {
    let mut out = Vec::new();
    for (op, arity) in PRIMITIVES {
        for wrt in 0..arity {
            let worst = (0..instances).map(|s| instance(op, wrt, s * 31 + wrt as u64).check::<T>()).fold(0.0, f64::max);
            out.push((op, wrt, worst));
        }
    }
    out
}

/// `|<conv(x), y> − <x, convT(y)>|` relative to the magnitude of the
/// products, for a random instance.
pub fn conv_adjoint_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
    let k = rng.random_range(1..=4usize);
    let s = rng.random_range(1..=3usize);
    let p = rng.random_range(0..k);
    // pick the output extent first so that the shapes line up exactly
    let (oh, ow) = (rng.random_range(1..=5usize), rng.random_range(1..=5usize));
    let pad = p.min(((oh.min(ow) - 1) * s + k - 1) / 2);
    let (h, w) = ((oh - 1) * s + k - 2 * pad, (ow - 1) * s + k - 2 * pad);
    let (_, xd) = uniform(&mut rng, &[b, ci, h, w]);
    let (_, wd) = uniform(&mut rng, &[co, ci, k, k]);
    let (_, yd) = uniform(&mut rng, &[b, co, oh, ow]);
    let mut g = Graph::<f32>::new();
    let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let x = g.constant(Tensor::new(&[b, ci, h, w], cast(&xd)).unwrap());
    let wt = g.constant(Tensor::new(&[co, ci, k, k], cast(&wd)).unwrap());
    let y = g.constant(Tensor::new(&[b, co, oh, ow], cast(&yd)).unwrap());
    let cx = g.conv2d(x, wt, s, pad).unwrap();
    assert_eq!(g.shape(cx), &[b, co, oh, ow]);
    let ty = g.conv_transpose2d(y, wt, s, pad).unwrap();
    assert_eq!(g.shape(ty), &[b, ci, h, w]);
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let abs_dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x as f64 * y as f64).abs()).sum::<f64>();
    let lhs = dot(g.value(cx).data(), g.value(y).data());
    let rhs = dot(g.value(x).data(), g.value(ty).data());
    let scale = abs_dot(g.value(cx).data(), g.value(y).data()).max(1.0);
    (lhs - rhs).abs() / scale
}
