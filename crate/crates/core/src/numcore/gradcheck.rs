use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::params::ParamStore;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor so that vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the gradients already accumulated in `store` against central
/// differences of `loss` at `n_probes` random scalars. Each probe picks a
/// parameter tensor uniformly, then an element uniformly within it.
pub fn finite_difference_check(
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    n_probes: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if store.is_empty() {
        return Err(invalid("no parameters to check"));
    }
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let ids: Vec<_> = store.ids().filter(|&id| !store.value(id).is_empty()).collect();
    let mut rng = seeded(seed);
    let mut work = store.clone();
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..store.value(id).len());
        let x0 = store.value(id).data()[index];
        work.value_mut(id).data_mut()[index] = x0 + h;
        let plus = loss(&work)?;
        work.value_mut(id).data_mut()[index] = x0 - h;
        let minus = loss(&work)?;
        work.value_mut(id).data_mut()[index] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while probing {}[{index}]",
                store.name(id)
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = store.grad(id).data()[index];
        probes.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
