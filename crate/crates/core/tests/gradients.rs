mod common;

use common::gradcat::{conv_adjoint_gap, worst_errors, PRIMITIVES};
use geopeft::tensor::{grad_check, Graph, Real, ScalarFn, Tensor, TensorError, Var};

#[test]
fn every_primitive_passes_in_f32() {
    let errs = worst_errors::<f32>(20);
    let bad: Vec<_> = errs.iter().filter(|e| e.2 > 1e-3).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn every_primitive_passes_in_f64() {
    let errs = worst_errors::<f64>(20);
    let bad: Vec<_> = errs.iter().filter(|e| e.2 > 1e-6).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn catalogue_covers_every_recorded_primitive() {
    // every op id the tape can record, except leaves
    let ids = [
        "add", "sub", "mul", "scale", "matmul", "reshape", "permute", "broadcast_to", "bias_add", "conv2d",
        "conv_transpose2d", "bilinear_interpolate", "reflect_pad", "concat", "slice", "layer_norm", "batch_norm",
        "gelu", "relu", "softmax", "sum", "mean", "adaptive_avg_pool2d", "max_pool2d", "dropout", "cross_entropy",
    ];
    let covered: Vec<&str> = PRIMITIVES.iter().map(|p| p.0).collect();
    assert_eq!(covered, ids);
}

#[test]
fn conv_and_transpose_are_adjoint() {
    for seed in 0..20 {
        let gap = conv_adjoint_gap(seed);
        assert!(gap <= 1e-5, "seed {seed}: {gap}");
    }
}

struct PrecisionDependent;

impl ScalarFn for PrecisionDependent {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        // scale differs between the 32-bit tape and the 64-bit oracle
        let f = if T::from_f64_lossy(0.1).as_f64() == 0.1 { 1.0 } else { 1.01 };
        let y = g.scale(x, f);
        let y = g.mul(y, x)?;
        Ok(g.sum(y))
    }
}

#[test]
fn a_wrong_gradient_is_detected() {
    let p = Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap();
    let r = grad_check(&PrecisionDependent, &p, 1e-5).unwrap();
    assert!(r.max_rel_error > 1e-3, "{r:?}");
}
