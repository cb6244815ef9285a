//! Central finite-difference gradient comparison.
//!
//! Test support. The numeric side only re-evaluates the forward loss, so it
//! stays independent of the backward implementation it checks.

use rand::Rng;

use crate::nn::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub points_checked: usize,
}

/// Compares the analytic gradients currently accumulated in `store` against
/// central differences of `loss`, at up to `points_per_param` random
/// coordinates of every trainable parameter.
///
/// Relative error convention: |num - ana| / max(|num| + |ana|, 1e-8).
pub fn compare_to_finite_difference(
    store: &mut ParamStore,
    loss: &mut dyn FnMut(&mut ParamStore) -> f64,
    points_per_param: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let analytic: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| e.grad.data().to_vec())
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        points_checked: 0,
    };
    for idx in 0..store.len() {
        if !store.entries()[idx].trainable {
            continue;
        }
        let n = store.entries()[idx].value.numel();
        let name = store.entries()[idx].name.clone();
        let picks: Vec<usize> = if n <= points_per_param {
            (0..n).collect()
        } else {
            (0..points_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let original = store.entry_mut(idx).value.data()[i];
            store.entry_mut(idx).value.data_mut()[i] = original + step;
            let plus = loss(store);
            store.entry_mut(idx).value.data_mut()[i] = original - step;
            let minus = loss(store);
            store.entry_mut(idx).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let ana = analytic[idx][i];
            let rel = (numeric - ana).abs() / (numeric.abs() + ana.abs()).max(1e-8);
            report.points_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: numeric={numeric:.3e} analytic={ana:.3e}");
            }
        }
    }
    report
}
