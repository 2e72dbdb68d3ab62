//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CpError, Result};
use crate::tensor::{ParamId, ParamStore};

/// Compares the analytic gradients already accumulated in `store` against
/// central finite differences of `loss_fn`, over up to `coords_per_param`
/// sampled coordinates of each listed parameter. Returns the max of
/// |analytic - numeric| / max(1, |numeric|).
///
/// `loss_fn` must be a pure function of the store (re-seed any RNG inside).
pub fn gradient_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss_fn: F,
    eps: f64,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut max_rel = 0.0f64;
    for &id in ids {
        let n = store.get(id).values.len();
        let name = store.get(id).name.clone();
        let analytic = store.get(id).grad.clone();

        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(coords_per_param);
            all
        };

        for ci in coords {
            let orig = store.get(id).values[ci];
            store.get_mut(id).values[ci] = orig + eps;
            let plus = loss_fn(store)?;
            store.get_mut(id).values[ci] = orig - eps;
            let minus = loss_fn(store)?;
            store.get_mut(id).values[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ci];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(CpError::Numeric(format!(
                    "gradient_check: non-finite value for parameter {name}[{ci}]"
                )));
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
