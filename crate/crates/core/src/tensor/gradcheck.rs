use super::{Graph, Real, Tensor, TensorError, Var};

/// A scalar-valued function of one tensor, expressible at any precision.
///
/// Being generic over the element type lets [`grad_check`] compare analytic
/// gradients at the working precision against central differences taken in
/// 64-bit, so the finite-difference oracle is not limited by 32-bit rounding.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
}

fn eval_f64<F: ScalarFn>(f: &F, point: &Tensor<f64>) -> Result<f64, TensorError> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(point.clone());
    let y = f.eval(&mut g, x)?;
    g.value(y)
        .item()
        .ok_or_else(|| TensorError::NonScalarRoot(g.shape(y).to_vec()))
}

/// Compares the tape gradient of `f` at `point` with central differences.
pub fn grad_check<T: Real, F: ScalarFn>(f: &F, point: &Tensor<T>, eps: f64) -> Result<GradCheckReport, TensorError> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::<T>::new();
    let x = g.leaf(point.clone(), true);
    let y = f.eval(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).map(|t| t.to_vec()).unwrap_or_else(|| vec![T::zero(); point.numel()]);

    let base: Tensor<f64> = point.cast();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0 };
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = eval_f64(f, &Tensor::from_vec(base.shape().to_vec(), plus))?;
        let fm = eval_f64(f, &Tensor::from_vec(base.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = a.as_f64();
        if !numeric.is_finite() || !a.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error {
            report = GradCheckReport { max_rel_error: err, worst_index: i };
        }
    }
    Ok(report)
}
