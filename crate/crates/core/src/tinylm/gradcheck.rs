//! Central finite-difference spot checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, Parameters};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error. Coordinates whose gradient is
/// smaller than this in magnitude are compared on an absolute scale, since
/// the central-difference truncation error (O(h²)) does not shrink with the
/// gradient itself.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<CoordinateCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Distinct coordinates sampled uniformly without replacement.
pub fn sample_coordinates(n_params: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n_params, count.min(n_params)).into_vec();
    idx.sort_unstable();
    idx
}

/// Compare `analytic` against `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for each
/// coordinate `i` in `coords`.
pub fn check_coordinates<F>(
    params: &Parameters,
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    tolerance: f64,
    mut loss: F,
) -> Result<GradCheckReport, ModelError>
where
    F: FnMut(&Parameters) -> Result<f64, ModelError>,
{
    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = None;
    for &i in coords {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = loss(&probe)?;
        probe.values_mut()[i] = orig - step;
        let minus = loss(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        max_abs = max_abs.max((analytic[i] - numeric).abs());
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some(CoordinateCheck {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        step,
        tolerance,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst,
        passed: max_rel <= tolerance,
    })
}
