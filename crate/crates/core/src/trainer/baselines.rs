use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tsdata::TimeSeriesBatch;

/// Non-learned imputations for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Training-split feature mean.
    Mean,
    /// Last observation carried forward, mean before the first one.
    Locf,
    /// Time-linear interpolation between neighbours, carried at the edges.
    Linear,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Mean, Baseline::Locf, Baseline::Linear];
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Locf => "locf",
            Self::Linear => "linear",
        })
    }
}

/// Prediction for one cell of a normalized view (the training mean is 0
/// there).
pub fn baseline_value(kind: Baseline, view: &TimeSeriesBatch, cell: [usize; 3]) -> f64 {
    let dims = view.dims();
    let [n, t, d] = cell;
    match kind {
        Baseline::Mean => 0.0,
        Baseline::Locf => {
            if view.mask()[dims.idx(n, t, d)] == 1.0 {
                view.values()[dims.idx(n, t, d)]
            } else if t == 0 {
                0.0
            } else {
                // last_obs at t-1 covers every step up to t-1
                let prev = dims.idx(n, t - 1, d);
                if (0..t).any(|k| view.mask()[dims.idx(n, k, d)] == 1.0) {
                    view.last_obs()[prev]
                } else {
                    0.0
                }
            }
        }
        Baseline::Linear => {
            let obs = |k: usize| view.mask()[dims.idx(n, k, d)] == 1.0;
            if obs(t) {
                return view.values()[dims.idx(n, t, d)];
            }
            let before = (0..t).rev().find(|&k| obs(k));
            let after = (t + 1..dims.t).find(|&k| obs(k));
            let ts = |k: usize| view.timestamps()[n * dims.t + k];
            let val = |k: usize| view.values()[dims.idx(n, k, d)];
            match (before, after) {
                (Some(a), Some(b)) => {
                    let w = (ts(t) - ts(a)) / (ts(b) - ts(a));
                    val(a) + w * (val(b) - val(a))
                }
                (Some(a), None) => val(a),
                (None, Some(b)) => val(b),
                (None, None) => 0.0,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsdata::Dims;

    fn series(values: &[f64], mask: &[f64], ts: &[f64]) -> TimeSeriesBatch {
        let t = values.len();
        TimeSeriesBatch::new(Dims::new(1, t, 1), values.to_vec(), mask.to_vec(), ts.to_vec(), None, vec![0.0]).unwrap()
    }

    #[test]
    fn baselines_on_a_gap() {
        let b = series(&[1.0, 0.0, 0.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(baseline_value(Baseline::Mean, &b, [0, 1, 0]), 0.0);
        assert_eq!(baseline_value(Baseline::Locf, &b, [0, 2, 0]), 1.0);
        assert_eq!(baseline_value(Baseline::Linear, &b, [0, 1, 0]), 1.75);
        assert_eq!(baseline_value(Baseline::Linear, &b, [0, 2, 0]), 3.25);
    }

    #[test]
    fn baselines_at_edges() {
        let b = series(&[0.0, 2.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 1.0, 2.0]);
        assert_eq!(baseline_value(Baseline::Locf, &b, [0, 0, 0]), 0.0);
        assert_eq!(baseline_value(Baseline::Locf, &b, [0, 2, 0]), 2.0);
        assert_eq!(baseline_value(Baseline::Linear, &b, [0, 0, 0]), 2.0);
        assert_eq!(baseline_value(Baseline::Linear, &b, [0, 2, 0]), 2.0);
    }
}
