//! Finite-difference verification of analytic gradients.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` at `point` with central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `f(x, want_grad)` returns the function value and, when asked, the analytic
/// gradient. The result is the maximum relative error, each element divided
/// by `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>, bool) -> Result<(f64, Option<Tensor<f64>>)>,
{
    let (value, analytic) = f(point, true)?;
    if !value.is_finite() {
        return Err(CoreError::NonFinite("grad_check objective".into()));
    }
    let analytic =
        analytic.ok_or_else(|| CoreError::Invalid("objective returned no gradient".into()))?;
    if analytic.shape() != point.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "grad_check",
            expected: format!("{:?}", point.shape()),
            actual: format!("{:?}", analytic.shape()),
        });
    }
    let mut x = point.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let (fp, _) = f(&x, false)?;
        x.data_mut()[i] = orig - h;
        let (fm, _) = f(&x, false)?;
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFinite("grad_check objective".into()));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check of a scalar loss w.r.t. one parameter of `store`.
pub fn param_grad_check<B>(store: &ParamStore<f64>, id: ParamId, h: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut local = store.clone();
    let point = store.get(id).value.clone();
    grad_check(
        |x, want| {
            local.set_value(id, x.clone())?;
            let mut g = Graph::new(&local);
            let loss = build(&mut g)?;
            let value = g.scalar(loss);
            if !want {
                return Ok((value, None));
            }
            let grads = g.backward(loss)?;
            let grad = match grads.param(id) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; x.numel()],
            };
            Ok((value, Some(Tensor::new(x.shape().to_vec(), grad)?)))
        },
        &point,
        h,
    )
}

/// Maximum [`param_grad_check`] error over every trainable parameter.
/// Returns the worst error and the name of the parameter it came from.
pub fn model_grad_check<B>(store: &ParamStore<f64>, h: f64, build: B) -> Result<(f64, String)>
where
    B: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut worst = (0.0, String::new());
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let err = param_grad_check(store, id, h, &build)?;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, p.name.clone());
        }
    }
    Ok(worst)
}
