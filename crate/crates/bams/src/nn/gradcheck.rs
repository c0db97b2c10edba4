//! Central finite-difference verification of analytic gradients.

use crate::nn::layers::ParamStore;
use crate::nn::tensor::Tensor;

/// Compares an analytic gradient against central differences of `eval`
/// for every coordinate of every parameter, returning the worst relative
/// error. `eval` must be a pure function of the store.
///
/// Stop-gradient semantics are the caller's responsibility: if the loss
/// contains sg nodes, `eval` must hold the stopped values fixed (that is
/// the function the analytic gradient differentiates).
#[allow(clippy::needless_range_loop)] // store and gradients indexed in lockstep
pub fn grad_check(
    params: &ParamStore,
    analytic: &[Tensor],
    eval: impl Fn(&ParamStore) -> f64,
    h: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient/store length mismatch");
    let mut worst: f64 = 0.0;
    let mut scratch = params.clone();
    for idx in 0..params.len() {
        let n = params.tensor_at(idx).len();
        for j in 0..n {
            let orig = params.tensor_at(idx).data()[j];
            scratch.tensor_at_mut(idx).data_mut()[j] = orig + h;
            let plus = eval(&scratch);
            scratch.tensor_at_mut(idx).data_mut()[j] = orig - h;
            let minus = eval(&scratch);
            scratch.tensor_at_mut(idx).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
