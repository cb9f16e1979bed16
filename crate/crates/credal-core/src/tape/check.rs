//! Gradient checking against central finite differences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::tape::optim::ParamSet;
use crate::tape::Tensor;

/// Relative error with the conventional floor: |a - b| / max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst per-entry relative error between two same-shaped tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Full central-difference gradient of `loss` with respect to every
/// coordinate of `params`. Exhaustive, so only for small parameter sets.
pub fn finite_difference_gradient(
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    fd_step: f64,
) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = params
        .entries()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    for coord in 0..params.num_coordinates() {
        let (entry, offset) = params.locate(coord).expect("coordinate in range");
        let mut perturbed = params.clone();
        perturbed.tensor_at_mut(entry).as_mut_slice()[offset] += fd_step;
        let hi = loss(&perturbed)?;
        perturbed.tensor_at_mut(entry).as_mut_slice()[offset] -= 2.0 * fd_step;
        let lo = loss(&perturbed)?;
        out[entry].as_mut_slice()[offset] = (hi - lo) / (2.0 * fd_step);
    }
    Ok(out)
}

/// Probe `probe_count` randomly chosen parameter coordinates (without
/// replacement; all of them when fewer exist) and return the worst relative
/// error between `analytic` and a central finite difference of `loss`.
///
/// `loss` must be a deterministic, frozen function of the parameters: any
/// discrete selection inside it (e.g. a top-k index set) has to be fixed at
/// the evaluation point, otherwise the comparison crosses a non-smooth
/// boundary and the result is meaningless.
pub fn grad_check(
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    analytic: &[Tensor],
    probe_count: usize,
    fd_step: f64,
    seed: u64,
) -> Result<f64> {
    let total = params.num_coordinates();
    let mut coords: Vec<usize> = (0..total).collect();
    if probe_count < total {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(probe_count);
        coords.sort_unstable();
    }
    let mut worst = 0.0f64;
    for coord in coords {
        let (entry, offset) = params.locate(coord).expect("coordinate in range");
        let mut perturbed = params.clone();
        perturbed.tensor_at_mut(entry).as_mut_slice()[offset] += fd_step;
        let hi = loss(&perturbed)?;
        perturbed.tensor_at_mut(entry).as_mut_slice()[offset] -= 2.0 * fd_step;
        let lo = loss(&perturbed)?;
        let numeric = (hi - lo) / (2.0 * fd_step);
        let exact = analytic[entry].as_slice()[offset];
        worst = worst.max(relative_error(exact, numeric));
    }
    Ok(worst)
}
