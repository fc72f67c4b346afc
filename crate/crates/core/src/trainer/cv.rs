use serde::{Deserialize, Serialize};

use super::fit::{run_split, SplitResult};
use super::TrainConfig;
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::derive_seed;
use crate::tsdata::{kfold_indices, Dataset, SplitIndices};

const STREAM_FOLDS: u64 = 11;
const STREAM_FOLD_RUN: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }

    /// Aggregate only when every value is present.
    pub fn of_all(xs: &[Option<f64>]) -> Option<Self> {
        let v: Option<Vec<f64>> = xs.iter().copied().collect();
        v.and_then(|v| Self::of(&v))
    }
}

/// Fold `k` is the test set, fold `k+1` the validation set, the rest train.
pub fn fold_splits(n: usize, labels: Option<&[u8]>, k: usize, seed: u64) -> Result<Vec<SplitIndices>> {
    if k < 3 {
        return Err(invalid(format!("cross-validation needs at least 3 folds, got {k}")));
    }
    if n < 5 * k {
        return Err(invalid(format!(
            "{n} samples give fewer than 5 per fold across {k} folds"
        )));
    }
    let folds = kfold_indices(n, labels, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let val_fold = (f + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&g| g != f && g != val_fold)
                .flat_map(|g| folds[g].iter().copied())
                .collect();
            train.sort_unstable();
            SplitIndices {
                train,
                val: folds[val_fold].clone(),
                test: folds[f].clone(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub split: SplitIndices,
    pub result: SplitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mae: MeanStd,
    pub mre: Option<MeanStd>,
    pub auc: Option<MeanStd>,
    pub mean_baseline_mae: MeanStd,
    pub locf_mae: MeanStd,
    pub linear_mae: MeanStd,
    pub best_epoch: MeanStd,
    pub train_mask_rate: Option<MeanStd>,
    pub test_mask_rate: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: TrainConfig,
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

pub fn summarize(folds: &[FoldResult]) -> Result<CvSummary> {
    if folds.is_empty() {
        return Err(invalid("no folds to summarize"));
    }
    let pick = |f: &dyn Fn(&SplitResult) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.result)).collect::<Vec<_>>()).unwrap();
    let pick_opt = |f: &dyn Fn(&SplitResult) -> Option<f64>| MeanStd::of_all(&folds.iter().map(|r| f(&r.result)).collect::<Vec<_>>());
    Ok(CvSummary {
        mae: pick(&|r| r.test.mae),
        mre: pick_opt(&|r| r.test.mre),
        auc: pick_opt(&|r| r.test.auc),
        mean_baseline_mae: pick(&|r| r.baselines.mean.mae),
        locf_mae: pick(&|r| r.baselines.locf.mae),
        linear_mae: pick(&|r| r.baselines.linear.mae),
        best_epoch: pick(&|r| r.best_epoch as f64),
        train_mask_rate: pick_opt(&|r| r.train_mask_rate),
        test_mask_rate: pick(&|r| r.test_mask_rate),
    })
}

/// K-fold cross-validation with per-fold normalization and reference gaps.
pub fn cross_validate(config: &TrainConfig, dataset: &Dataset) -> Result<CvReport> {
    config.validate()?;
    let splits = fold_splits(
        dataset.len(),
        dataset.batch.labels(),
        config.folds,
        derive_seed(config.seed, STREAM_FOLDS),
    )?;
    let jobs: Vec<(usize, SplitIndices)> = splits.into_iter().enumerate().collect();
    let results = par::map(jobs, |(fold, split)| {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(config.seed, STREAM_FOLD_RUN + fold as u64);
        run_split(&cfg, dataset, &split, &format!("fold{fold}.train")).map(|result| FoldResult { fold, split, result })
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&folds)?;
    Ok(CvReport {
        config: config.clone(),
        folds,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_rotate_and_cover() {
        let splits = fold_splits(27, None, 5, 3).unwrap();
        for (f, s) in splits.iter().enumerate() {
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..27).collect::<Vec<_>>());
            assert_eq!(s.val, splits[(f + 1) % 5].test);
        }
        let mut tests: Vec<usize> = splits.iter().flat_map(|s| s.test.clone()).collect();
        tests.sort_unstable();
        assert_eq!(tests, (0..27).collect::<Vec<_>>());
        assert!(fold_splits(24, None, 5, 3).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
        assert!(MeanStd::of_all(&[Some(1.0), None]).is_none());
    }
}
