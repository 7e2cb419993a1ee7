//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Raster, Shape};

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `x`, entry by
/// entry, and returns the largest relative error.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("forward value at entry {i} during gradient check")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Deterministic generator for test instances.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Raster with entries uniform in [-1, 1).
pub fn random_raster(rng: &mut impl Rng, shape: Shape) -> Raster {
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Raster::from_vec(shape, data).expect("length matches shape")
}
