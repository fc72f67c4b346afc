use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::masking::EvalTargets;
use crate::tsdata::{Dims, NormStats};

/// Imputation metrics over artificially masked cells, in feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    /// `sum |err| / sum |truth|`; absent when every truth is zero.
    pub mre: Option<f64>,
    pub auc: Option<f64>,
    /// Absent for features without evaluated cells.
    pub per_feature_mae: Vec<Option<f64>>,
    pub n_cells: usize,
}

/// Score predictions for `targets` (both normalized) after mapping back to
/// feature units. `predict` returns the normalized prediction for a cell.
pub fn score_cells(
    targets: &EvalTargets,
    dims: Dims,
    stats: &NormStats,
    mut predict: impl FnMut([usize; 3]) -> f64,
) -> Result<Metrics> {
    if targets.cells.is_empty() {
        return Err(invalid("no evaluation cells"));
    }
    if targets.cells.len() != targets.values.len() || stats.mean.len() != dims.d {
        return Err(shape("evaluation targets do not match the batch"));
    }
    let mut err_sum = 0.0;
    let mut truth_sum = 0.0;
    let mut per = vec![(0.0, 0usize); dims.d];
    for (&cell, &z) in targets.cells.iter().zip(&targets.values) {
        let f = cell[2];
        let truth = stats.denormalize(f, z);
        let pred = stats.denormalize(f, predict(cell));
        let e = (pred - truth).abs();
        err_sum += e;
        truth_sum += truth.abs();
        per[f].0 += e;
        per[f].1 += 1;
    }
    let n = targets.cells.len();
    Ok(Metrics {
        mae: err_sum / n as f64,
        mre: (truth_sum > 0.0).then(|| err_sum / truth_sum),
        auc: None,
        per_feature_mae: per.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
        n_cells: n,
    })
}

/// Mann-Whitney AUC; tied pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}
