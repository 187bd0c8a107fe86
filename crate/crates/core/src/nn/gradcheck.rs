//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::nn::param::Parameterized;
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Per parameter name: worst relative error among its checked coordinates.
    pub groups: Vec<(String, f64)>,
    pub coordinates_checked: usize,
}

/// Denominator floor for the relative error; below it both gradients are
/// treated as zero.
const REL_FLOOR: f64 = 1e-8;

/// Compares the gradients currently stored in `model` against
/// `(loss(p + ε) - loss(p - ε)) / 2ε` per coordinate.
///
/// `coords_per_param` bounds how many coordinates of each tensor are probed
/// (`None` probes all of them). `loss_fn` must be deterministic.
pub fn finite_difference_check<T, M, F>(
    model: &mut M,
    mut loss_fn: F,
    epsilon: T,
    coords_per_param: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    T: Scalar,
    M: Parameterized<T>,
    F: FnMut(&M) -> T,
{
    let analytic: Vec<(String, Vec<T>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, groups: Vec::new(), coordinates_checked: 0 };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let coords: Vec<usize> = match coords_per_param {
            Some(limit) if limit < n => {
                let mut rng = rng_for(seed, name, pi as u64);
                sample(&mut rng, n, limit).into_vec()
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for c in coords {
            let original = model.params_mut()[pi].value.data()[c];
            model.params_mut()[pi].value.data_mut()[c] = original + epsilon;
            let plus = loss_fn(model);
            model.params_mut()[pi].value.data_mut()[c] = original - epsilon;
            let minus = loss_fn(model);
            model.params_mut()[pi].value.data_mut()[c] = original;

            let numeric = ((plus - minus) / (epsilon + epsilon)).to_f64_lossy();
            let a = grads[c].to_f64_lossy();
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < REL_FLOOR { 0.0 } else { (a - numeric).abs() / denom };
            worst = worst.max(rel);
            report.coordinates_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.groups.push((name.clone(), worst));
    }
    report
}
