//! Central finite-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite value while checking input {input} coordinate {index}")]
    NonFinite { input: usize, index: usize },
    #[error("analytic gradient {index} has shape {got:?}, input has {want:?}")]
    Shape {
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("max relative error {error:.3e} exceeds tolerance {tolerance:.1e}")]
    Tolerance { error: f64, tolerance: f64 },
}

/// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], step: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    grad_check_sampled(f, inputs, analytic, step, None, 0)
}

/// As [`grad_check`], but checks at most `max_coords` randomly chosen
/// coordinates of each input (chosen deterministically from `seed`).
pub fn grad_check_sampled<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    grad_check_guarded(|t| (f(t), 0), inputs, analytic, step, max_coords, seed).map(|s| s.max_error)
}

/// Outcome of a guarded check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckStats {
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
}

/// Finite-difference check for piecewise-smooth functions. `f` returns the
/// value and a signature of its active piece (e.g. ReLU masks and pool
/// argmaxes); a coordinate whose `+step` or `-step` evaluation lands on a
/// different piece than the unperturbed point has no central difference
/// there and is skipped.
pub fn grad_check_guarded<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckStats, GradCheckError>
where
    F: FnMut(&[Tensor<f64>]) -> (f64, u64),
{
    if inputs.len() != analytic.len() {
        return Err(GradCheckError::Shape {
            index: inputs.len().min(analytic.len()),
            got: vec![analytic.len()],
            want: vec![inputs.len()],
        });
    }
    for (i, (x, g)) in inputs.iter().zip(analytic).enumerate() {
        if x.shape() != g.shape() {
            return Err(GradCheckError::Shape {
                index: i,
                got: g.shape().to_vec(),
                want: x.shape().to_vec(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let base_sig = f(&work).1;
    let mut stats = GradCheckStats {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..inputs.len() {
        let len = inputs[i].len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for idx in coords {
            let orig = work[i].data()[idx];
            work[i].data_mut()[idx] = orig + step;
            let (up, sig_up) = f(&work);
            work[i].data_mut()[idx] = orig - step;
            let (down, sig_down) = f(&work);
            work[i].data_mut()[idx] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                stats.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite { input: i, index: idx });
            }
            stats.checked += 1;
            stats.max_error = stats.max_error.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(stats)
}

/// Fails with [`GradCheckError::Tolerance`] when `error > tolerance`.
pub fn within(error: f64, tolerance: f64) -> Result<f64, GradCheckError> {
    if error <= tolerance {
        Ok(error)
    } else {
        Err(GradCheckError::Tolerance { error, tolerance })
    }
}
