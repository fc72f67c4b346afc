//! Artificial masking: exact-count uniform plans, the non-uniform strategy
//! driven by per-feature missingness, a legacy under-masking mode kept for
//! comparison, split policies and plan audits.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::tsdata::{Dims, TimeSeriesBatch};

/// How the cells of a plan were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    UniformCorrected,
    UniformLegacy,
    Nonuniform,
}

/// Uniform masking implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Corrected,
    Legacy,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "corrected" => Ok(Self::Corrected),
            "legacy" => Ok(Self::Legacy),
            other => Err(invalid(format!("unknown mask mode {other:?}"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corrected => "corrected",
            Self::Legacy => "legacy",
        })
    }
}

/// A (sample, step, feature) cell.
pub type Cell = [usize; 3];

/// Cells to hide, with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub strategy: Strategy,
    pub target_rate: f64,
    pub adjust_factor: f64,
    pub seed: u64,
    /// Sorted, distinct, all observed in the source batch.
    pub cells: Vec<Cell>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Per-feature missing rate over all N*T cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingDistribution {
    pub p_dist: Vec<f64>,
    pub n_obs: Vec<usize>,
}

pub fn feature_missing_distribution(batch: &TimeSeriesBatch) -> Result<MissingDistribution> {
    let dims = batch.dims();
    let total = dims.n * dims.t;
    if total == 0 {
        return Err(invalid("missing distribution of an empty dataset"));
    }
    let mut n_obs = vec![0usize; dims.d];
    for (i, &m) in batch.mask().iter().enumerate() {
        if m == 1.0 {
            n_obs[i % dims.d] += 1;
        }
    }
    let p_dist = n_obs.iter().map(|&c| 1.0 - c as f64 / total as f64).collect();
    Ok(MissingDistribution { p_dist, n_obs })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("masking rate {rate} must lie in [0, 1)")));
    }
    Ok(())
}

fn unflatten(dims: Dims, i: usize) -> Cell {
    [i / (dims.t * dims.d), (i / dims.d) % dims.t, i % dims.d]
}

/// Round half away from zero; `f64::round` already does this.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Uniform plan over the whole batch.
///
/// `Corrected` draws exactly `round(rate * n_observed)` distinct observed
/// cells. `Legacy` draws that many candidates over *all* cells and keeps the
/// observed ones, so the realized rate shrinks with the share of cells that
/// were already missing.
pub fn plan_uniform_mask(batch: &TimeSeriesBatch, rate: f64, seed: u64, mode: MaskMode) -> Result<MaskPlan> {
    check_rate(rate)?;
    let dims = batch.dims();
    let mask = batch.mask();
    let observed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 1.0).collect();
    let count = round_count(rate * observed.len() as f64);
    let mut rng = seeded(seed);
    let mut flat: Vec<usize> = match mode {
        MaskMode::Corrected => index::sample(&mut rng, observed.len(), count)
            .into_iter()
            .map(|k| observed[k])
            .collect(),
        MaskMode::Legacy => index::sample(&mut rng, mask.len(), count.min(mask.len()))
            .into_iter()
            .filter(|&i| mask[i] == 1.0)
            .collect(),
    };
    flat.sort_unstable();
    Ok(MaskPlan {
        strategy: match mode {
            MaskMode::Corrected => Strategy::UniformCorrected,
            MaskMode::Legacy => Strategy::UniformLegacy,
        },
        target_rate: rate,
        adjust_factor: 0.0,
        seed,
        cells: flat.into_iter().map(|i| unflatten(dims, i)).collect(),
    })
}

/// Per-feature mask counts for the non-uniform strategy.
///
/// Weights `w(d) = 1 + I * p_dist(d)` are rescaled so the observed-weighted
/// mean rate equals `rate`; rates above 1 are capped and their excess is
/// shared among the other features in proportion to `w(d) * n_obs(d)`.
/// Counts are apportioned by largest remainder and sum to
/// `round(rate * total observed)`.
pub fn nonuniform_counts(rate: f64, adjust: f64, dist: &MissingDistribution) -> Result<Vec<usize>> {
    check_rate(rate)?;
    if !(adjust >= 0.0) || !adjust.is_finite() {
        return Err(invalid(format!("adjust factor {adjust} must be finite and nonnegative")));
    }
    let d = dist.n_obs.len();
    if dist.p_dist.len() != d {
        return Err(invalid("missing distribution vectors differ in length"));
    }
    let total_obs: usize = dist.n_obs.iter().sum();
    let target = round_count(rate * total_obs as f64);
    let weight: Vec<f64> = dist.p_dist.iter().map(|&p| 1.0 + adjust * p).collect();
    let mut raw = vec![0.0; d];
    let mut capped = vec![false; d];
    // Masked mass still to place among uncapped features.
    let mut remaining = rate * total_obs as f64;
    loop {
        let denom: f64 = (0..d)
            .filter(|&f| !capped[f])
            .map(|f| weight[f] * dist.n_obs[f] as f64)
            .sum();
        if remaining <= 0.0 {
            break;
        }
        if denom <= 0.0 {
            return Err(invalid("every feature is capped; target masking rate is unreachable"));
        }
        let mut newly = false;
        for f in 0..d {
            if capped[f] {
                continue;
            }
            let share = remaining * weight[f] * dist.n_obs[f] as f64 / denom;
            if share >= dist.n_obs[f] as f64 && dist.n_obs[f] > 0 {
                capped[f] = true;
                raw[f] = dist.n_obs[f] as f64;
                newly = true;
            } else {
                raw[f] = share;
            }
        }
        if !newly {
            break;
        }
        remaining = rate * total_obs as f64
            - (0..d).filter(|&f| capped[f]).map(|f| raw[f]).sum::<f64>();
        for f in (0..d).filter(|&f| !capped[f]) {
            raw[f] = 0.0;
        }
    }
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > target {
        return Err(invalid("apportionment overshoot"));
    }
    let mut order: Vec<usize> = (0..d).filter(|&f| counts[f] < dist.n_obs[f]).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let extra = target - assigned;
    if extra > order.len() {
        return Err(invalid("every feature is capped; target masking rate is unreachable"));
    }
    for &f in order.iter().take(extra) {
        counts[f] += 1;
    }
    Ok(counts)
}

/// Non-uniform plan: per-feature counts from [`nonuniform_counts`], cells
/// drawn uniformly within each feature.
pub fn plan_nonuniform_mask(
    batch: &TimeSeriesBatch,
    rate: f64,
    adjust: f64,
    dist: &MissingDistribution,
    seed: u64,
) -> Result<MaskPlan> {
    let dims = batch.dims();
    if dist.n_obs.len() != dims.d {
        return Err(invalid("missing distribution does not match batch features"));
    }
    let own = feature_missing_distribution(batch)?;
    // Rates may come from a reference split; counts must fit this batch.
    let local = MissingDistribution {
        p_dist: dist.p_dist.clone(),
        n_obs: own.n_obs,
    };
    let counts = nonuniform_counts(rate, adjust, &local)?;
    let mask = batch.mask();
    let mut rng = seeded(seed);
    let mut flat = Vec::with_capacity(counts.iter().sum());
    for (f, &count) in counts.iter().enumerate() {
        let cells: Vec<usize> = (f..mask.len()).step_by(dims.d).filter(|&i| mask[i] == 1.0).collect();
        flat.extend(index::sample(&mut rng, cells.len(), count).into_iter().map(|k| cells[k]));
    }
    flat.sort_unstable();
    Ok(MaskPlan {
        strategy: Strategy::Nonuniform,
        target_rate: rate,
        adjust_factor: adjust,
        seed,
        cells: flat.into_iter().map(|i| unflatten(dims, i)).collect(),
    })
}

/// Held-out cells and their true values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTargets {
    pub cells: Vec<Cell>,
    pub values: Vec<f64>,
}

/// Hide the planned cells. The returned view has recomputed `delta` and
/// `last_obs`; the hidden values come back as evaluation targets.
pub fn apply_mask_plan(batch: &TimeSeriesBatch, plan: &MaskPlan) -> Result<(TimeSeriesBatch, EvalTargets)> {
    let dims = batch.dims();
    let mut values = batch.values().to_vec();
    let mut mask = batch.mask().to_vec();
    let mut targets = EvalTargets {
        cells: Vec::with_capacity(plan.len()),
        values: Vec::with_capacity(plan.len()),
    };
    for &[n, t, d] in &plan.cells {
        if n >= dims.n || t >= dims.t || d >= dims.d {
            return Err(Error::CorruptPlan(format!("cell ({n}, {t}, {d}) out of range")));
        }
        let i = dims.idx(n, t, d);
        if mask[i] != 1.0 {
            return Err(Error::CorruptPlan(format!(
                "cell ({n}, {t}, {d}) is not observed or is listed twice"
            )));
        }
        targets.cells.push([n, t, d]);
        targets.values.push(values[i]);
        mask[i] = 0.0;
        values[i] = 0.0;
    }
    Ok((batch.with_values_and_mask(values, mask)?, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub strategy: Strategy,
    pub target_rate: f64,
    pub n_observed: usize,
    pub n_planned: usize,
    pub realized_rate: f64,
    pub deviation: f64,
    pub per_feature_rate: Vec<f64>,
    pub p_dist: Vec<f64>,
    /// Spearman correlation of per-feature realized rate with `p_dist`.
    pub rate_pdist_correlation: Option<f64>,
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Realized rates of a plan against the batch it was drawn from.
pub fn audit_mask_plan(plan: &MaskPlan, batch: &TimeSeriesBatch) -> Result<MaskAudit> {
    let dims = batch.dims();
    let dist = feature_missing_distribution(batch)?;
    let n_observed: usize = dist.n_obs.iter().sum();
    let mut per_feature = vec![0usize; dims.d];
    for c in &plan.cells {
        if c[2] < dims.d {
            per_feature[c[2]] += 1;
        }
    }
    let realized_rate = if n_observed == 0 {
        0.0
    } else {
        plan.len() as f64 / n_observed as f64
    };
    let per_feature_rate: Vec<f64> = per_feature
        .iter()
        .zip(&dist.n_obs)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(MaskAudit {
        strategy: plan.strategy,
        target_rate: plan.target_rate,
        n_observed,
        n_planned: plan.len(),
        realized_rate,
        deviation: realized_rate - plan.target_rate,
        rate_pdist_correlation: spearman(&per_feature_rate, &dist.p_dist),
        per_feature_rate,
        p_dist: dist.p_dist,
    })
}

/// Which data splits receive non-uniform masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Permutation {
    All,
    #[serde(rename = "Train_only")]
    TrainOnly,
    #[serde(rename = "Val_only")]
    ValOnly,
    #[serde(rename = "Test_only")]
    TestOnly,
    #[serde(rename = "Val_Test")]
    ValTest,
    None,
}

impl Permutation {
    pub const ALL: [Permutation; 6] = [
        Self::All,
        Self::TrainOnly,
        Self::ValOnly,
        Self::TestOnly,
        Self::ValTest,
        Self::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::All => "All",
            Self::TrainOnly => "Train_only",
            Self::ValOnly => "Val_only",
            Self::TestOnly => "Test_only",
            Self::ValTest => "Val_Test",
            Self::None => "None",
        }
    }
}

impl FromStr for Permutation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown masking permutation {s:?}")))
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Strategy for one split: non-uniform where the permutation names the
/// split, corrected uniform elsewhere.
pub fn select_split_policy(permutation: Permutation, split: SplitRole) -> Strategy {
    use Permutation as P;
    use SplitRole as S;
    let nonuniform = matches!(
        (permutation, split),
        (P::All, _)
            | (P::TrainOnly, S::Train)
            | (P::ValOnly, S::Val)
            | (P::TestOnly, S::Test)
            | (P::ValTest, S::Val | S::Test)
    );
    if nonuniform {
        Strategy::Nonuniform
    } else {
        Strategy::UniformCorrected
    }
}

/// Plan for a split under a permutation policy. `mode` replaces the uniform
/// implementation; non-uniform plans use `dist` for their per-feature rates.
pub fn plan_for_split(
    batch: &TimeSeriesBatch,
    permutation: Permutation,
    split: SplitRole,
    mode: MaskMode,
    rate: f64,
    adjust: f64,
    dist: &MissingDistribution,
    seed: u64,
) -> Result<MaskPlan> {
    match select_split_policy(permutation, split) {
        Strategy::Nonuniform => plan_nonuniform_mask(batch, rate, adjust, dist, seed),
        _ => plan_uniform_mask(batch, rate, seed, mode),
    }
}
