use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error. Coordinates with gradients
/// below it are compared absolutely: central differences of a loss of order
/// 1 carry roundoff near 1e-10, which would swamp a purely relative measure
/// on gradients of order 1e-7.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Compares `analytic` against central differences of `loss_fn` at every
/// scalar of `store`; returns the worst relative error
/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn finite_difference_check<F>(mut loss_fn: F, store: &ParamStore, analytic: &Gradients, eps: f64) -> Result<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let first = loss_fn(store);
    let second = loss_fn(store);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (pi, buf) in analytic.buffers().iter().enumerate() {
        for (k, &a) in buf.iter().enumerate() {
            let orig = probe_value(&mut probe, pi, k, None);
            probe_value(&mut probe, pi, k, Some(orig + eps));
            let up = loss_fn(&probe);
            probe_value(&mut probe, pi, k, Some(orig - eps));
            let down = loss_fn(&probe);
            probe_value(&mut probe, pi, k, Some(orig));
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn probe_value(store: &mut ParamStore, param: usize, k: usize, set: Option<f64>) -> f64 {
    let p = store.iter_mut().nth(param).expect("param index");
    let v = &mut p.value.values_mut()[k];
    let old = *v;
    if let Some(s) = set {
        *v = s;
    }
    old
}
