//! Central-difference validation of hand-derived gradients.

use crate::error::{Error, Result};
use crate::numerics::params::{Grads, ParamId, ParamStore};

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar loss; when handed a `Grads` buffer it must also
/// accumulate analytic gradients into it. Returns the maximum relative error
/// `|analytic − numeric| / max(1, |numeric|)` over every entry of every listed
/// parameter.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamStore, Option<&mut Grads>) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut grads = Grads::zeros_like(store);
    let base = f(store, Some(&mut grads))?;
    if !base.is_finite() {
        return Err(Error::invalid(format!("grad_check loss is not finite: {base}")));
    }
    let mut worst = 0.0_f64;
    for &id in ids {
        for entry in 0..store.value(id).len() {
            let orig = store.value(id).data()[entry];
            store.value_mut(id).data_mut()[entry] = orig + eps;
            let plus = f(store, None)?;
            store.value_mut(id).data_mut()[entry] = orig - eps;
            let minus = f(store, None)?;
            store.value_mut(id).data_mut()[entry] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::invalid("grad_check perturbed loss is not finite"));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).data()[entry];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
