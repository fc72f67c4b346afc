use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_value, Baseline};
use super::loss::{loss_graph, ReconTarget};
use super::metrics::{auc, score_cells, Metrics};
use super::TrainConfig;
use crate::csai::CsaiModel;
use crate::error::{invalid, Error, Result};
use crate::masking::{
    apply_mask_plan, audit_mask_plan, feature_missing_distribution, plan_for_split, EvalTargets, MaskPlan,
    MissingDistribution, SplitRole,
};
use crate::numcore::{adam_step, AdamConfig, ParamStore, Tape};
use crate::rng::{derive_seed, seeded};
use crate::tsdata::{
    apply_normalizer, compute_median_gaps, fit_normalizer, Dataset, MedianGaps, NormStats, SplitIndices,
    TimeSeriesBatch,
};

const STREAM_INIT: u64 = 1;
const STREAM_VAL_PLAN: u64 = 2;
const STREAM_TEST_PLAN: u64 = 3;
const STREAM_TRAIN_PLAN: u64 = 1 << 20;
const STREAM_SHUFFLE: u64 = 2 << 20;

/// Normalized splits and the statistics fitted on the training part.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub stats: NormStats,
    pub tau: MedianGaps,
    pub dist: MissingDistribution,
    pub train: TimeSeriesBatch,
    pub val: TimeSeriesBatch,
    pub test: TimeSeriesBatch,
}

/// Fit normalization, reference gaps and the missingness profile on the
/// training samples only, then normalize all three splits.
pub fn prepare_splits(dataset: &Dataset, split: &SplitIndices, name: &str) -> Result<PreparedSplits> {
    let n = dataset.len();
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if i >= n || seen[i] {
            return Err(invalid(format!("split index {i} is out of range or repeated")));
        }
        seen[i] = true;
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(invalid("every split needs at least one sample"));
    }
    let train = dataset.batch.select(&split.train)?;
    let stats = fit_normalizer(&train, name);
    let tau = compute_median_gaps(&train)?;
    let dist = feature_missing_distribution(&train)?;
    Ok(PreparedSplits {
        train: apply_normalizer(&train, &stats)?,
        val: apply_normalizer(&dataset.batch.select(&split.val)?, &stats)?,
        test: apply_normalizer(&dataset.batch.select(&split.test)?, &stats)?,
        stats,
        tau,
        dist,
    })
}

/// One row of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_mae: f64,
    pub train_mask_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CsaiModel,
    /// Parameters with the lowest validation MAE.
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Model outputs needed for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub imputation: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Forward pass in chunks of `chunk` samples.
pub fn predict(model: &CsaiModel, store: &ParamStore, batch: &TimeSeriesBatch, chunk: usize) -> Result<Prediction> {
    let n = batch.dims().n;
    let chunk = chunk.max(1);
    let mut imputation = Vec::with_capacity(batch.dims().cells());
    let mut scores = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = if idx.len() == n { batch.clone() } else { batch.select(&idx)? };
        let out = model.forward(store, &part)?;
        imputation.extend(out.imputation);
        scores.extend(out.scores);
    }
    Ok(Prediction { imputation, scores })
}

/// Score a model on the artificially masked cells of `view`.
pub fn evaluate(
    model: &CsaiModel,
    store: &ParamStore,
    view: &TimeSeriesBatch,
    targets: &EvalTargets,
    stats: &NormStats,
    chunk: usize,
) -> Result<Metrics> {
    let pred = predict(model, store, view, chunk)?;
    let dims = view.dims();
    let mut m = score_cells(targets, dims, stats, |[n, t, d]| pred.imputation[dims.idx(n, t, d)])?;
    m.auc = view.labels().and_then(|y| auc(&pred.scores, y).ok());
    Ok(m)
}

pub fn evaluate_baseline(kind: Baseline, view: &TimeSeriesBatch, targets: &EvalTargets, stats: &NormStats) -> Result<Metrics> {
    score_cells(targets, view.dims(), stats, |cell| baseline_value(kind, view, cell))
}

fn mask_split(
    batch: &TimeSeriesBatch,
    role: SplitRole,
    config: &TrainConfig,
    dist: &MissingDistribution,
    seed: u64,
) -> Result<(TimeSeriesBatch, EvalTargets, f64)> {
    let m = &config.masking;
    let plan = plan_for_split(batch, m.permutation, role, m.mode, m.rate, m.adjust_factor, dist, seed)?;
    let rate = audit_mask_plan(&plan, batch)?.realized_rate;
    let (view, targets) = apply_mask_plan(batch, &plan)?;
    Ok((view, targets, rate))
}

/// The plan training uses on one split: the fixed validation or test plan,
/// or the first epoch's training plan.
pub fn split_plan(config: &TrainConfig, data: &PreparedSplits, role: SplitRole) -> Result<MaskPlan> {
    let (batch, stream) = match role {
        SplitRole::Train => (&data.train, STREAM_TRAIN_PLAN + 1),
        SplitRole::Val => (&data.val, STREAM_VAL_PLAN),
        SplitRole::Test => (&data.test, STREAM_TEST_PLAN),
    };
    let m = &config.masking;
    plan_for_split(batch, m.permutation, role, m.mode, m.rate, m.adjust_factor, &data.dist, derive_seed(config.seed, stream))
}

fn diagnostics(store: &ParamStore) -> String {
    store
        .norms()
        .iter()
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Train on the normalized `train` split and select parameters by masked
/// MAE on a fixed plan over `val`.
pub fn train(config: &TrainConfig, data: &PreparedSplits) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = data.train.dims();
    let seed = config.seed;
    let (model, mut store) = CsaiModel::init(
        config.model.clone(),
        dims.t,
        dims.d,
        Some(&data.tau),
        derive_seed(seed, STREAM_INIT),
    )?;
    let (val_view, val_targets, _) =
        mask_split(&data.val, SplitRole::Val, config, &data.dist, derive_seed(seed, STREAM_VAL_PLAN))?;
    let val_mae =
        |store: &ParamStore| evaluate(&model, store, &val_view, &val_targets, &data.stats, config.batch_size).map(|m| m.mae);

    let initial = val_mae(&store)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_mae: initial,
        train_mask_rate: None,
    }];
    let mut best = (0, initial, store.clone());
    let adam = AdamConfig {
        lr: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut step = 0u64;
    let original = &data.train;
    for epoch in 1..=config.epochs {
        let (view, _, rate) = mask_split(
            original,
            SplitRole::Train,
            config,
            &data.dist,
            derive_seed(seed, STREAM_TRAIN_PLAN + epoch as u64),
        )?;
        let mut order: Vec<usize> = (0..dims.n).collect();
        order.shuffle(&mut seeded(derive_seed(seed, STREAM_SHUFFLE + epoch as u64)));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            let part = view.select(&idx)?;
            let orig = original.select(&idx)?;
            let target = ReconTarget {
                values: orig.values().to_vec(),
                mask: orig.mask().to_vec(),
            };
            if target.mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let mut tape = Tape::new();
            let graph = model.graph(&mut tape, &store, &part)?;
            let (root, parts) = loss_graph(&mut tape, &graph, &target, part.labels(), &config.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {} at epoch {epoch}, batch {b}; parameter norms: {}",
                    parts.total,
                    diagnostics(&store)
                )));
            }
            store.zero_grad();
            tape.backward_into(root, &mut store)?;
            step += 1;
            adam_step(&mut store, &adam, step)?;
            model.project(&mut store);
            loss_sum += parts.total;
            n_batches += 1;
        }
        let mae = val_mae(&store)?;
        if !mae.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation MAE at epoch {epoch}; parameter norms: {}",
                diagnostics(&store)
            )));
        }
        let train_loss = (n_batches > 0).then(|| loss_sum / n_batches as f64);
        debug!("epoch {epoch}: loss {train_loss:?}, val mae {mae:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae: mae,
            train_mask_rate: Some(rate),
        });
        if mae < best.1 {
            best = (epoch, mae, store.clone());
        } else if epoch - best.0 >= config.patience {
            info!("early stop at epoch {epoch}, best epoch {}", best.0);
            break;
        }
    }
    let (best_epoch, best_val_mae, store) = best;
    Ok(TrainOutcome {
        model,
        store,
        history,
        best_epoch,
        best_val_mae,
    })
}

/// Baseline metrics on the test cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub mean: Metrics,
    pub locf: Metrics,
    pub linear: Metrics,
}

/// Everything measured on one train/validation/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub test: Metrics,
    pub val: Metrics,
    pub baselines: BaselineMetrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Realized rate of the first training plan.
    pub train_mask_rate: Option<f64>,
    pub test_mask_rate: f64,
    pub history: Vec<EpochRecord>,
    pub norm: NormStats,
    pub tau: Vec<f64>,
}

/// Test and validation metrics of fixed parameters, with the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub test: Metrics,
    pub val: Metrics,
    pub baselines: BaselineMetrics,
    pub test_mask_rate: f64,
}

/// Score `model` on the fixed validation and test plans of `config.seed`.
pub fn evaluate_split(
    config: &TrainConfig,
    data: &PreparedSplits,
    model: &CsaiModel,
    store: &ParamStore,
) -> Result<SplitEvaluation> {
    let seed = config.seed;
    let (test_view, test_targets, test_rate) =
        mask_split(&data.test, SplitRole::Test, config, &data.dist, derive_seed(seed, STREAM_TEST_PLAN))?;
    let (val_view, val_targets, _) =
        mask_split(&data.val, SplitRole::Val, config, &data.dist, derive_seed(seed, STREAM_VAL_PLAN))?;
    let eval = |view, targets| evaluate(model, store, view, targets, &data.stats, config.batch_size);
    let base = |kind| evaluate_baseline(kind, &test_view, &test_targets, &data.stats);
    Ok(SplitEvaluation {
        test: eval(&test_view, &test_targets)?,
        val: eval(&val_view, &val_targets)?,
        baselines: BaselineMetrics {
            mean: base(Baseline::Mean)?,
            locf: base(Baseline::Locf)?,
            linear: base(Baseline::Linear)?,
        },
        test_mask_rate: test_rate,
    })
}

/// Assemble the split report from a finished training run.
pub fn split_result(config: &TrainConfig, data: &PreparedSplits, outcome: &TrainOutcome) -> Result<SplitResult> {
    let e = evaluate_split(config, data, &outcome.model, &outcome.store)?;
    Ok(SplitResult {
        test: e.test,
        val: e.val,
        baselines: e.baselines,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len() - 1,
        train_mask_rate: outcome.history.get(1).and_then(|h| h.train_mask_rate),
        test_mask_rate: e.test_mask_rate,
        history: outcome.history.clone(),
        norm: data.stats.clone(),
        tau: data.tau.tau.clone(),
    })
}

/// Prepare, train and score one split.
pub fn run_split(config: &TrainConfig, dataset: &Dataset, split: &SplitIndices, name: &str) -> Result<SplitResult> {
    let data = prepare_splits(dataset, split, name)?;
    let outcome = train(config, &data)?;
    split_result(config, &data, &outcome)
}
