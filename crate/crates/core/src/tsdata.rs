//! Incomplete multivariate time series: representation, derived indicators,
//! splitting, leakage-safe normalization, table ingestion and synthetic MNAR
//! data.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Sample, step and feature counts of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub t: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, t: usize, d: usize) -> Self {
        Self { n, t, d }
    }

    pub fn cells(&self) -> usize {
        self.n * self.t * self.d
    }

    #[inline]
    pub fn idx(&self, n: usize, t: usize, d: usize) -> usize {
        (n * self.t + t) * self.d + d
    }
}

/// One batch of samples sharing the same number of steps and features.
///
/// `values` is zero wherever `mask` is zero; the model only ever reads
/// missing cells through `last_obs` or an imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    dims: Dims,
    values: Vec<f64>,
    mask: Vec<f64>,
    timestamps: Vec<f64>,
    delta: Vec<f64>,
    last_obs: Vec<f64>,
    labels: Option<Vec<u8>>,
    fill: Vec<f64>,
}

impl TimeSeriesBatch {
    /// Build a batch and derive `delta` and `last_obs`.
    ///
    /// `fill[d]` is what `last_obs` holds before the first observation of
    /// feature `d`.
    pub fn new(
        dims: Dims,
        values: Vec<f64>,
        mask: Vec<f64>,
        timestamps: Vec<f64>,
        labels: Option<Vec<u8>>,
        fill: Vec<f64>,
    ) -> Result<Self> {
        if dims.t == 0 || dims.d == 0 {
            return Err(invalid("batch needs at least one step and one feature"));
        }
        if values.len() != dims.cells() || mask.len() != dims.cells() {
            return Err(shape(format!(
                "values/mask length {}/{} != {}",
                values.len(),
                mask.len(),
                dims.cells()
            )));
        }
        if timestamps.len() != dims.n * dims.t {
            return Err(shape(format!(
                "timestamps length {} != {}",
                timestamps.len(),
                dims.n * dims.t
            )));
        }
        if fill.len() != dims.d {
            return Err(shape(format!("fill length {} != {}", fill.len(), dims.d)));
        }
        if let Some(l) = &labels {
            if l.len() != dims.n {
                return Err(shape(format!("labels length {} != {}", l.len(), dims.n)));
            }
            if l.iter().any(|&y| y > 1) {
                return Err(invalid("labels must be binary"));
            }
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(invalid("mask must be binary"));
        }
        for n in 0..dims.n {
            let s = &timestamps[n * dims.t..(n + 1) * dims.t];
            if let Some(step) = first_non_increasing(s) {
                return Err(Error::NonIncreasingTime { sample: n, step });
            }
        }
        let mut values = values;
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m == 0.0 {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite("observed value".into()));
            }
        }
        let delta = batch_delta(dims, &timestamps, &mask);
        let last_obs = build_last_observation(dims, &values, &mask, &fill)?;
        Ok(Self {
            dims,
            values,
            mask,
            timestamps,
            delta,
            last_obs,
            labels,
            fill,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }
    pub fn last_obs(&self) -> &[f64] {
        &self.last_obs
    }
    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }
    pub fn fill(&self) -> &[f64] {
        &self.fill
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// Rebuild with new values and mask; derived matrices are recomputed.
    pub fn with_values_and_mask(&self, values: Vec<f64>, mask: Vec<f64>) -> Result<Self> {
        Self::new(
            self.dims,
            values,
            mask,
            self.timestamps.clone(),
            self.labels.clone(),
            self.fill.clone(),
        )
    }

    pub fn with_fill(&self, fill: Vec<f64>) -> Result<Self> {
        Self::new(
            self.dims,
            self.values.clone(),
            self.mask.clone(),
            self.timestamps.clone(),
            self.labels.clone(),
            fill,
        )
    }

    /// Samples `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let Dims { n, t, d } = self.dims;
        let per = t * d;
        let mut values = Vec::with_capacity(indices.len() * per);
        let mut mask = Vec::with_capacity(indices.len() * per);
        let mut ts = Vec::with_capacity(indices.len() * t);
        for &i in indices {
            if i >= n {
                return Err(invalid(format!("sample index {i} out of range {n}")));
            }
            values.extend_from_slice(&self.values[i * per..(i + 1) * per]);
            mask.extend_from_slice(&self.mask[i * per..(i + 1) * per]);
            ts.extend_from_slice(&self.timestamps[i * t..(i + 1) * t]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            Dims::new(indices.len(), t, d),
            values,
            mask,
            ts,
            labels,
            self.fill.clone(),
        )
    }

    /// The same samples with time running backwards. Timestamps become
    /// `s'[k] = s[T-1] - s[T-1-k]`; deltas and last observations are
    /// recomputed for the new order.
    pub fn reversed(&self) -> Self {
        let Dims { n, t, d } = self.dims;
        let mut values = vec![0.0; self.values.len()];
        let mut mask = vec![0.0; self.mask.len()];
        let mut ts = vec![0.0; self.timestamps.len()];
        for s in 0..n {
            let last = self.timestamps[s * t + t - 1];
            for k in 0..t {
                let src = t - 1 - k;
                ts[s * t + k] = last - self.timestamps[s * t + src];
                for f in 0..d {
                    values[self.dims.idx(s, k, f)] = self.values[self.dims.idx(s, src, f)];
                    mask[self.dims.idx(s, k, f)] = self.mask[self.dims.idx(s, src, f)];
                }
            }
        }
        Self::new(
            self.dims,
            values,
            mask,
            ts,
            self.labels.clone(),
            self.fill.clone(),
        )
        .expect("reversal preserves batch invariants")
    }
}

fn first_non_increasing(s: &[f64]) -> Option<usize> {
    if s.iter().any(|x| !x.is_finite()) {
        return Some(s.iter().position(|x| !x.is_finite()).unwrap_or(0));
    }
    (1..s.len()).find(|&k| s[k] <= s[k - 1])
}

/// Time gap since the previous observation of one feature.
///
/// `delta[0] = 0`. For later steps the gap accumulates while the *previous*
/// step was missing and resets to the raw step gap after an observed step,
/// so a feature last seen at hour 0 has `delta = 9` at hour 9.
pub fn compute_delta(timestamps: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if timestamps.is_empty() {
        return Err(invalid("empty sequence"));
    }
    if timestamps.len() != mask.len() {
        return Err(shape("timestamps and mask lengths differ"));
    }
    if let Some(step) = first_non_increasing(timestamps) {
        return Err(invalid(format!(
            "timestamps must be strictly increasing (step {step})"
        )));
    }
    let mut delta = vec![0.0; timestamps.len()];
    for k in 1..timestamps.len() {
        let gap = timestamps[k] - timestamps[k - 1];
        delta[k] = if mask[k - 1] == 0.0 {
            gap + delta[k - 1]
        } else {
            gap
        };
    }
    Ok(delta)
}

fn batch_delta(dims: Dims, timestamps: &[f64], mask: &[f64]) -> Vec<f64> {
    let mut delta = vec![0.0; dims.cells()];
    for n in 0..dims.n {
        for k in 1..dims.t {
            let gap = timestamps[n * dims.t + k] - timestamps[n * dims.t + k - 1];
            for f in 0..dims.d {
                let prev = dims.idx(n, k - 1, f);
                delta[dims.idx(n, k, f)] = if mask[prev] == 0.0 {
                    gap + delta[prev]
                } else {
                    gap
                };
            }
        }
    }
    delta
}

/// Last observation carried forward; `fill[d]` before the first observation.
pub fn build_last_observation(
    dims: Dims,
    values: &[f64],
    mask: &[f64],
    fill: &[f64],
) -> Result<Vec<f64>> {
    if values.len() != dims.cells() || mask.len() != dims.cells() || fill.len() != dims.d {
        return Err(shape("last-observation inputs disagree with dims"));
    }
    let mut out = vec![0.0; dims.cells()];
    for n in 0..dims.n {
        for f in 0..dims.d {
            let mut carry = fill[f];
            for k in 0..dims.t {
                let i = dims.idx(n, k, f);
                if mask[i] == 1.0 {
                    carry = values[i];
                }
                out[i] = carry;
            }
        }
    }
    Ok(out)
}

/// Per-feature median gap between consecutive observed timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianGaps {
    pub tau: Vec<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median observed-to-observed gap per feature, pooled over the samples of
/// the training split. Features observed fewer than twice in total get the
/// median of the other features' values.
pub fn compute_median_gaps(train: &TimeSeriesBatch) -> Result<MedianGaps> {
    let dims = train.dims();
    if dims.n == 0 {
        return Err(invalid("median gaps need a nonempty training split"));
    }
    let mut tau = vec![None; dims.d];
    for (f, slot) in tau.iter_mut().enumerate() {
        let mut gaps = Vec::new();
        for n in 0..dims.n {
            let mut prev: Option<f64> = None;
            for k in 0..dims.t {
                if train.mask[dims.idx(n, k, f)] == 1.0 {
                    let s = train.timestamps[n * dims.t + k];
                    if let Some(p) = prev {
                        gaps.push(s - p);
                    }
                    prev = Some(s);
                }
            }
        }
        if !gaps.is_empty() {
            *slot = Some(median(&mut gaps));
        }
    }
    let mut known: Vec<f64> = tau.iter().flatten().copied().collect();
    if known.is_empty() {
        return Err(invalid("no feature is observed twice in the training split"));
    }
    let fallback = median(&mut known);
    Ok(MedianGaps {
        tau: tau.into_iter().map(|t| t.unwrap_or(fallback)).collect(),
    })
}

/// Train/validation/test sample indices, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded ordering of `0..n` in which every prefix holds each label class in
/// proportion (within one sample). Without labels this is a plain shuffle.
fn stratified_order(n: usize, labels: Option<&[u8]>, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match labels {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        }
        Some(labels) => {
            let mut keyed = Vec::with_capacity(n);
            for class in 0..=1u8 {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                members.shuffle(&mut rng);
                let size = members.len() as f64;
                for (rank, i) in members.into_iter().enumerate() {
                    keyed.push(((rank as f64 + 0.5) / size, class, i));
                }
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().map(|(_, _, i)| i).collect()
        }
    }
}

/// Deterministic split, stratified by label when labels are given.
pub fn split_dataset(
    n: usize,
    labels: Option<&[u8]>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    let (tr, va, te) = ratios;
    if n == 0 {
        return Err(invalid("cannot split an empty dataset"));
    }
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(shape("labels length differs from sample count"));
        }
    }
    let n_val = (va * n as f64).round() as usize;
    let n_test = (te * n as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(invalid(format!(
            "ratios {ratios:?} leave an empty split for {n} samples"
        )));
    }
    let order = stratified_order(n, labels, seed);
    let mut val = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

/// `k` disjoint folds covering `0..n`, stratified like [`split_dataset`].
pub fn kfold_indices(n: usize, labels: Option<&[u8]>, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(invalid(format!("cannot make {k} folds from {n} samples")));
    }
    let order = stratified_order(n, labels, seed);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Per-feature standardization constants fitted on training observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: String,
    /// Features without any observed training cell (mean 0, std 1).
    #[serde(default)]
    pub unobserved: Vec<usize>,
}

impl NormStats {
    pub fn normalize(&self, d: usize, x: f64) -> f64 {
        (x - self.mean[d]) / self.std[d]
    }

    pub fn denormalize(&self, d: usize, z: f64) -> f64 {
        z * self.std[d] + self.mean[d]
    }
}

/// Population mean and standard deviation over the observed cells of the
/// training split. Zero-variance features get `std = 1`.
pub fn fit_normalizer(train: &TimeSeriesBatch, fitted_on: &str) -> NormStats {
    let dims = train.dims();
    let mut sum = vec![0.0; dims.d];
    let mut count = vec![0usize; dims.d];
    for (i, (&v, &m)) in train.values.iter().zip(&train.mask).enumerate() {
        if m == 1.0 {
            sum[i % dims.d] += v;
            count[i % dims.d] += 1;
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; dims.d];
    for (i, (&v, &m)) in train.values.iter().zip(&train.mask).enumerate() {
        if m == 1.0 {
            let f = i % dims.d;
            sq[f] += (v - mean[f]) * (v - mean[f]);
        }
    }
    let mut unobserved = Vec::new();
    let std = (0..dims.d)
        .map(|f| {
            if count[f] == 0 {
                log::warn!("feature {f} has no observed training cells; using mean 0, std 1");
                unobserved.push(f);
                return 1.0;
            }
            let s = (sq[f] / count[f] as f64).sqrt();
            if s <= f64::EPSILON * mean[f].abs().max(1.0) {
                1.0
            } else {
                s
            }
        })
        .collect();
    NormStats {
        mean,
        std,
        fitted_on: fitted_on.to_string(),
        unobserved,
    }
}

/// Standardize observed cells. The result uses fill 0 (the training mean)
/// for steps before a feature's first observation.
pub fn apply_normalizer(batch: &TimeSeriesBatch, stats: &NormStats) -> Result<TimeSeriesBatch> {
    let d = batch.dims().d;
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(shape(format!(
            "normalizer has {} features, batch has {d}",
            stats.mean.len()
        )));
    }
    let values = batch
        .values
        .iter()
        .zip(&batch.mask)
        .enumerate()
        .map(|(i, (&v, &m))| if m == 1.0 { stats.normalize(i % d, v) } else { 0.0 })
        .collect();
    TimeSeriesBatch::new(
        batch.dims,
        values,
        batch.mask.clone(),
        batch.timestamps.clone(),
        batch.labels.clone(),
        vec![0.0; d],
    )
}

/// Inverse of [`apply_normalizer`] on observed cells; fill becomes the mean.
pub fn invert_normalizer(batch: &TimeSeriesBatch, stats: &NormStats) -> Result<TimeSeriesBatch> {
    let d = batch.dims().d;
    if stats.mean.len() != d {
        return Err(shape("normalizer/batch feature count mismatch"));
    }
    let values = batch
        .values
        .iter()
        .zip(&batch.mask)
        .enumerate()
        .map(|(i, (&z, &m))| if m == 1.0 { stats.denormalize(i % d, z) } else { 0.0 })
        .collect();
    TimeSeriesBatch::new(
        batch.dims,
        values,
        batch.mask.clone(),
        batch.timestamps.clone(),
        batch.labels.clone(),
        stats.mean.clone(),
    )
}

/// A batch in feature units plus optional complete ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub batch: TimeSeriesBatch,
    /// Values before missingness was applied (synthetic data only).
    pub truth: Option<Vec<f64>>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.batch.dims().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let dims = self.batch.dims();
        let per = dims.t * dims.d;
        let truth = self.truth.as_ref().map(|tr| {
            indices
                .iter()
                .flat_map(|&i| tr[i * per..(i + 1) * per].iter().copied())
                .collect()
        });
        Ok(Self {
            batch: self.batch.select(indices)?,
            truth,
            feature_names: self.feature_names.clone(),
        })
    }
}

fn default_gap() -> f64 {
    1.0
}
fn default_autocorr() -> f64 {
    0.9
}
fn default_cross() -> f64 {
    0.6
}
fn default_label_strength() -> f64 {
    2.0
}

/// Synthetic MNAR generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_steps: usize,
    pub n_features: usize,
    /// Target marginal missing rate per feature, each in [0, 1).
    pub missing_rates: Vec<f64>,
    /// How strongly missingness depends on the latent value (0 = MCAR).
    pub mnar_coupling: f64,
    /// Mean spacing of the irregular sampling grid, in hours.
    #[serde(default = "default_gap")]
    pub mean_gap_hours: f64,
    /// Latent autocorrelation over one hour.
    #[serde(default = "default_autocorr")]
    pub autocorrelation: f64,
    /// Share of latent variance explained by the common factor.
    #[serde(default = "default_cross")]
    pub cross_correlation: f64,
    #[serde(default = "default_label_strength")]
    pub label_strength: f64,
    #[serde(default)]
    pub feature_means: Option<Vec<f64>>,
    #[serde(default)]
    pub feature_scales: Option<Vec<f64>>,
}

impl SyntheticConfig {
    /// Heterogeneous missing rates between 0.2 and 0.8.
    pub fn desk_scale(n_samples: usize, n_steps: usize, n_features: usize) -> Self {
        let missing_rates = (0..n_features)
            .map(|f| {
                if n_features == 1 {
                    0.5
                } else {
                    0.2 + 0.6 * f as f64 / (n_features - 1) as f64
                }
            })
            .collect();
        Self {
            n_samples,
            n_steps,
            n_features,
            missing_rates,
            mnar_coupling: 1.0,
            mean_gap_hours: default_gap(),
            autocorrelation: default_autocorr(),
            cross_correlation: default_cross(),
            label_strength: default_label_strength(),
            feature_means: None,
            feature_scales: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_steps == 0 || self.n_features == 0 {
            return Err(invalid("synthetic config needs N, T, D > 0"));
        }
        if self.missing_rates.len() != self.n_features {
            return Err(shape("missing_rates length must equal n_features"));
        }
        if let Some(r) = self.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(invalid(format!("missing rate {r} must lie in [0, 1)")));
        }
        if !(self.mean_gap_hours > 0.0) {
            return Err(invalid("mean_gap_hours must be positive"));
        }
        if !(0.0..1.0).contains(&self.autocorrelation) {
            return Err(invalid("autocorrelation must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cross_correlation) {
            return Err(invalid("cross_correlation must lie in [0, 1]"));
        }
        for v in [&self.feature_means, &self.feature_scales].into_iter().flatten() {
            if v.len() != self.n_features {
                return Err(shape("feature means/scales length must equal n_features"));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offset `b` with `E[sigmoid(b + c z)] = p` for `z ~ N(0, 1)`, so the
/// marginal missing rate matches `p` at any coupling `c`.
fn calibrate_offset(p: f64, coupling: f64) -> f64 {
    const GRID: usize = 4001;
    let expected = |b: f64| {
        let h = 20.0 / (GRID - 1) as f64;
        let mut acc = 0.0;
        for i in 0..GRID {
            let z = -10.0 + i as f64 * h;
            let w = if i == 0 || i == GRID - 1 { 0.5 } else { 1.0 };
            acc += w * sigmoid(b + coupling * z) * (-0.5 * z * z).exp();
        }
        acc * h / (2.0 * std::f64::consts::PI).sqrt()
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Correlated Ornstein-Uhlenbeck latents on an irregular grid with
/// value-dependent missingness. Labels depend on late values of the first
/// features.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let dims = Dims::new(config.n_samples, config.n_steps, config.n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = config
        .feature_means
        .clone()
        .unwrap_or_else(|| (0..dims.d).map(|f| 50.0 + 10.0 * f as f64).collect());
    let scales: Vec<f64> = config
        .feature_scales
        .clone()
        .unwrap_or_else(|| (0..dims.d).map(|f| 5.0 + f as f64).collect());
    let offsets: Vec<f64> = config
        .missing_rates
        .iter()
        .map(|&p| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                calibrate_offset(p, config.mnar_coupling)
            }
        })
        .collect();
    let common = config.cross_correlation.sqrt();
    let own = (1.0 - config.cross_correlation).sqrt();

    let mut timestamps = vec![0.0; dims.n * dims.t];
    let mut latent = vec![0.0; dims.cells()];
    let mut mask = vec![0.0; dims.cells()];
    let mut labels = Vec::with_capacity(dims.n);
    for n in 0..dims.n {
        let mut factor: f64 = rng.sample(StandardNormal);
        let mut idio: Vec<f64> = (0..dims.d).map(|_| rng.sample(StandardNormal)).collect();
        let mut s = 0.0;
        for k in 0..dims.t {
            if k > 0 {
                let gap = config.mean_gap_hours * rng.random_range(0.5..1.5);
                s += gap;
                let a = config.autocorrelation.powf(gap);
                let innov = (1.0 - a * a).sqrt();
                factor = a * factor + innov * rng.sample::<f64, _>(StandardNormal);
                for e in idio.iter_mut() {
                    *e = a * *e + innov * rng.sample::<f64, _>(StandardNormal);
                }
            }
            timestamps[n * dims.t + k] = s;
            for f in 0..dims.d {
                let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                let z = sign * common * factor + own * idio[f];
                let i = dims.idx(n, k, f);
                latent[i] = z;
                let p_miss = sigmoid(offsets[f] + config.mnar_coupling * z);
                mask[i] = if rng.random::<f64>() < p_miss { 0.0 } else { 1.0 };
            }
        }
        let late = (dims.t * 3 / 4).min(dims.t - 1);
        let feats = dims.d.min(2);
        let mut score = 0.0;
        for k in late..dims.t {
            for f in 0..feats {
                score += latent[dims.idx(n, k, f)];
            }
        }
        score /= ((dims.t - late) * feats) as f64;
        let p = sigmoid(config.label_strength * score);
        labels.push(u8::from(rng.random::<f64>() < p));
    }
    let truth: Vec<f64> = latent
        .iter()
        .enumerate()
        .map(|(i, &z)| means[i % dims.d] + scales[i % dims.d] * z)
        .collect();
    let values = truth
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m == 1.0 { v } else { 0.0 })
        .collect();
    let batch = TimeSeriesBatch::new(dims, values, mask, timestamps, Some(labels), means)?;
    Ok(Dataset {
        batch,
        truth: Some(truth),
        feature_names: (0..dims.d).map(|f| format!("feature_{}", f + 1)).collect(),
    })
}

/// Column layout of the delimited ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub sample_column: String,
    pub time_column: String,
    /// Optional per-row binary outcome, constant within a sample.
    pub label_column: Option<String>,
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            sample_column: "sample_id".into(),
            time_column: "time".into(),
            label_column: Some("label".into()),
        }
    }
}

fn parse_cell(raw: &str, row: usize, what: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Table {
            row,
            message: format!("cannot parse {what} value {raw:?}"),
        })
}

/// Read a comma-delimited table with a header row.
///
/// Rows are grouped by sample id in order of first appearance; within a
/// sample time must strictly increase down the file. Samples shorter than
/// the longest one are padded at the end with fully missing steps spaced
/// one hour apart. Row numbers in errors count the header as row 1.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let sid_col = col(&schema.sample_column)
        .ok_or_else(|| invalid(format!("missing column {:?}", schema.sample_column)))?;
    let time_col = col(&schema.time_column)
        .ok_or_else(|| invalid(format!("missing column {:?}", schema.time_column)))?;
    let label_col = schema.label_column.as_deref().and_then(col);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != sid_col && c != time_col && Some(c) != label_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(invalid("table has no feature columns"));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].trim().to_string()).collect();
    let d = feature_cols.len();

    struct Sample {
        times: Vec<f64>,
        rows: Vec<Vec<Option<f64>>>,
        label: Option<u8>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<String, Sample> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let sid = rec.get(sid_col).unwrap_or("").trim().to_string();
        if sid.is_empty() {
            return Err(Error::Table { row, message: "empty sample id".into() });
        }
        let time = parse_cell(rec.get(time_col).unwrap_or(""), row, "time")?
            .ok_or_else(|| Error::Table { row, message: "missing time".into() })?;
        let cells = feature_cols
            .iter()
            .map(|&c| parse_cell(rec.get(c).unwrap_or(""), row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        let label = match label_col {
            Some(c) => match parse_cell(rec.get(c).unwrap_or(""), row, "label")? {
                None => None,
                Some(v) if v == 0.0 || v == 1.0 => Some(v as u8),
                Some(v) => {
                    return Err(Error::Table { row, message: format!("label {v} is not binary") })
                }
            },
            None => None,
        };
        let entry = samples.entry(sid.clone()).or_insert_with(|| {
            order.push(sid.clone());
            Sample { times: Vec::new(), rows: Vec::new(), label: None }
        });
        if let Some(&prev) = entry.times.last() {
            if time == prev {
                return Err(Error::Table {
                    row,
                    message: format!("duplicate time {time} for sample {sid}"),
                });
            }
            if time < prev {
                return Err(Error::Table {
                    row,
                    message: format!("time {time} goes backwards for sample {sid} (previous {prev})"),
                });
            }
        }
        if let (Some(a), Some(b)) = (entry.label, label) {
            if a != b {
                return Err(Error::Table { row, message: format!("conflicting label for sample {sid}") });
            }
        }
        entry.label = entry.label.or(label);
        entry.times.push(time);
        entry.rows.push(cells);
    }
    if order.is_empty() {
        return Err(invalid("table has no data rows"));
    }
    let t = order.iter().map(|s| samples[s].times.len()).max().unwrap_or(0);
    let dims = Dims::new(order.len(), t, d);
    let mut values = vec![0.0; dims.cells()];
    let mut mask = vec![0.0; dims.cells()];
    let mut timestamps = vec![0.0; dims.n * t];
    let has_labels = label_col.is_some() && order.iter().all(|s| samples[s].label.is_some());
    let mut labels = Vec::with_capacity(dims.n);
    for (n, sid) in order.iter().enumerate() {
        let s = &samples[sid];
        for k in 0..t {
            timestamps[n * t + k] = match s.times.get(k) {
                Some(&x) => x,
                None => s.times[s.times.len() - 1] + (k + 1 - s.times.len()) as f64,
            };
            if let Some(cells) = s.rows.get(k) {
                for (f, v) in cells.iter().enumerate() {
                    if let Some(v) = v {
                        values[dims.idx(n, k, f)] = *v;
                        mask[dims.idx(n, k, f)] = 1.0;
                    }
                }
            }
        }
        labels.push(s.label.unwrap_or(0));
    }
    let batch = TimeSeriesBatch::new(
        dims,
        values,
        mask,
        timestamps,
        has_labels.then_some(labels),
        vec![0.0; d],
    )?;
    Ok(Dataset { batch, truth: None, feature_names })
}

/// Write the observed view of a dataset in the ingestion format. With
/// `use_truth`, every cell is written from the ground truth instead.
pub fn write_table(dataset: &Dataset, path: &Path, use_truth: bool) -> Result<()> {
    let batch = &dataset.batch;
    let dims = batch.dims();
    let truth = match (use_truth, &dataset.truth) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(invalid("dataset has no ground truth")),
        _ => None,
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "time".to_string()];
    header.extend(dataset.feature_names.iter().cloned());
    if batch.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for n in 0..dims.n {
        for k in 0..dims.t {
            let mut rec = vec![n.to_string(), batch.timestamps()[n * dims.t + k].to_string()];
            for f in 0..dims.d {
                let i = dims.idx(n, k, f);
                rec.push(match truth {
                    Some(t) => t[i].to_string(),
                    None if batch.mask()[i] == 1.0 => batch.values()[i].to_string(),
                    None => String::new(),
                });
            }
            if let Some(l) = batch.labels() {
                rec.push(l[n].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Scan back to the latest observed step strictly before `t`.
    fn delta_oracle(s: &[f64], m: &[f64]) -> Vec<f64> {
        (0..s.len())
            .map(|t| {
                if t == 0 {
                    return 0.0;
                }
                let anchor = (0..t).rev().find(|&k| m[k] == 1.0).unwrap_or(0);
                s[t] - s[anchor]
            })
            .collect()
    }

    fn single(values: &[f64], mask: &[f64], ts: &[f64]) -> TimeSeriesBatch {
        TimeSeriesBatch::new(
            Dims::new(1, ts.len(), 1),
            values.to_vec(),
            mask.to_vec(),
            ts.to_vec(),
            None,
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn delta_worked_example() {
        let d = compute_delta(&[0.0, 4.0, 5.0, 7.0, 9.0], &[1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d, vec![0.0, 4.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn delta_fully_observed_resets() {
        let d = compute_delta(&[0.0, 2.0, 5.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(d, vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn delta_rejects_non_increasing() {
        assert!(compute_delta(&[0.0, 2.0, 2.0], &[1.0; 3]).is_err());
        let err = TimeSeriesBatch::new(
            Dims::new(2, 2, 1),
            vec![0.0; 4],
            vec![1.0; 4],
            vec![0.0, 1.0, 3.0, 2.0],
            None,
            vec![0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonIncreasingTime { sample: 1, step: 1 }));
    }

    proptest! {
        #[test]
        fn delta_matches_scan_back(bits in proptest::collection::vec(0u8..2, 5)) {
            let s = [0.0, 1.0, 3.0, 6.0, 10.0];
            let m: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            prop_assert_eq!(compute_delta(&s, &m).unwrap(), delta_oracle(&s, &m));
        }

        #[test]
        fn batch_delta_matches_scan_back(
            bits in proptest::collection::vec(0u8..2, 3 * 6 * 2),
            gaps in proptest::collection::vec(0.1f64..5.0, 3 * 6),
        ) {
            let dims = Dims::new(3, 6, 2);
            let mask: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let mut ts = vec![0.0; 18];
            for n in 0..3 { for k in 1..6 { ts[n*6+k] = ts[n*6+k-1] + gaps[n*6+k]; } }
            let b = TimeSeriesBatch::new(dims, vec![1.0; 36], mask.clone(), ts.clone(), None, vec![0.0; 2]).unwrap();
            for n in 0..3 { for f in 0..2 {
                let s = &ts[n*6..n*6+6];
                let m: Vec<f64> = (0..6).map(|k| mask[dims.idx(n,k,f)]).collect();
                let want = delta_oracle(s, &m);
                for k in 0..6 { prop_assert!((b.delta()[dims.idx(n,k,f)] - want[k]).abs() < 1e-12); }
            }}
        }
    }

    #[test]
    fn last_obs_carries_forward_and_fills() {
        let b = single(&[5.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 2.0]);
        assert_eq!(b.last_obs(), &[5.0, 5.0, 5.0]);
        let b = single(&[0.0; 3], &[0.0; 3], &[0.0, 1.0, 2.0]);
        assert_eq!(b.last_obs(), &[0.0; 3]);
    }

    #[test]
    fn last_obs_matches_rescan_oracle() {
        let dims = Dims::new(1, 10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mask: Vec<f64> = (0..40).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let fill = vec![-1.0, -2.0, -3.0, -4.0];
        let got = build_last_observation(dims, &values, &mask, &fill).unwrap();
        for t in 0..10 {
            for f in 0..4 {
                let mut want = fill[f];
                for k in 0..=t {
                    if mask[dims.idx(0, k, f)] == 1.0 {
                        want = values[dims.idx(0, k, f)];
                    }
                }
                assert_eq!(got[dims.idx(0, t, f)], want);
            }
        }
    }

    #[test]
    fn median_gaps_examples() {
        // feature 0 observed at {0,4,9}; feature 1 every step; feature 2 never
        let ts = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut mask = vec![0.0; 30];
        for k in 0..10 {
            mask[k * 3 + 1] = 1.0;
        }
        for k in [0, 4, 9] {
            mask[k * 3] = 1.0;
        }
        let b = TimeSeriesBatch::new(Dims::new(1, 10, 3), vec![0.0; 30], mask, ts.to_vec(), None, vec![0.0; 3]).unwrap();
        let g = compute_median_gaps(&b).unwrap();
        assert_eq!(g.tau[0], 4.5);
        assert_eq!(g.tau[1], 1.0);
        // fallback: median of {4.5, 1.0}
        assert_eq!(g.tau[2], 2.75);
    }

    #[test]
    fn median_gaps_empty_errors() {
        let b = TimeSeriesBatch::new(Dims::new(0, 3, 1), vec![], vec![], vec![], None, vec![0.0]).unwrap();
        assert!(compute_median_gaps(&b).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(100, None, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(100, None, (0.8, 0.1, 0.1), 7).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_stratifies_labels() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        for seed in 0..20 {
            let s = split_dataset(100, Some(&labels), (0.8, 0.1, 0.1), seed).unwrap();
            for part in [&s.train, &s.val, &s.test] {
                let pos = part.iter().filter(|&&i| labels[i] == 1).count() as f64;
                assert!((pos - part.len() as f64 / 2.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn split_rejects_empty_split() {
        assert!(split_dataset(5, None, (0.9, 0.05, 0.05), 1).is_err());
        assert!(split_dataset(10, None, (0.5, 0.5, 0.1), 1).is_err());
    }

    #[test]
    fn kfold_disjoint_cover() {
        let folds = kfold_indices(23, None, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
    }

    #[test]
    fn normalizer_two_point_and_constant() {
        let b = TimeSeriesBatch::new(
            Dims::new(1, 3, 2),
            vec![1.0, 5.0, 3.0, 5.0, 0.0, 5.0],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0],
            vec![0.0, 1.0, 2.0],
            None,
            vec![0.0; 2],
        )
        .unwrap();
        let st = fit_normalizer(&b, "train");
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert_eq!(st.std, vec![1.0, 1.0]);
        let z = apply_normalizer(&b, &st).unwrap();
        assert_eq!(z.values()[0], -1.0);
        assert_eq!(z.values()[2], 1.0);
        let back = invert_normalizer(&z, &st).unwrap();
        for (a, b) in back.values().iter().zip(b.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_unobserved_feature() {
        let b = TimeSeriesBatch::new(Dims::new(1, 2, 1), vec![0.0; 2], vec![0.0; 2], vec![0.0, 1.0], None, vec![0.0]).unwrap();
        let st = fit_normalizer(&b, "train");
        assert_eq!((st.mean[0], st.std[0]), (0.0, 1.0));
        assert_eq!(st.unobserved, vec![0]);
    }

    #[test]
    fn normalizer_dimension_mismatch() {
        let b = single(&[1.0], &[1.0], &[0.0]);
        let st = NormStats { mean: vec![0.0; 2], std: vec![1.0; 2], fitted_on: "x".into(), unobserved: vec![] };
        assert!(apply_normalizer(&b, &st).is_err());
    }

    #[test]
    fn synthetic_rates_and_determinism() {
        let mut cfg = SyntheticConfig::desk_scale(400, 50, 2);
        cfg.missing_rates = vec![0.2, 0.8];
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let dims = a.batch.dims();
        for (f, want) in [0.2, 0.8].into_iter().enumerate() {
            let miss = (0..dims.n * dims.t)
                .filter(|i| a.batch.mask()[i * dims.d + f] == 0.0)
                .count() as f64
                / (dims.n * dims.t) as f64;
            assert!((miss - want).abs() < 0.03, "feature {f}: {miss}");
        }
    }

    #[test]
    fn synthetic_mcar_at_zero_coupling() {
        let mut cfg = SyntheticConfig::desk_scale(200, 50, 1);
        cfg.missing_rates = vec![0.4];
        cfg.mnar_coupling = 0.0;
        let ds = generate_synthetic(&cfg, 5).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let m = ds.batch.mask();
        let n = m.len() as f64;
        let (mx, my) = (truth.iter().sum::<f64>() / n, m.iter().sum::<f64>() / n);
        let cov: f64 = truth.iter().zip(m).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let sx = (truth.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (m.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
        assert!((cov / (sx * sy)).abs() < 0.05);
    }

    #[test]
    fn synthetic_rejects_infeasible_rate() {
        let mut cfg = SyntheticConfig::desk_scale(10, 5, 2);
        cfg.missing_rates = vec![0.5, 1.0];
        assert!(generate_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn reversed_twice_is_identity() {
        let cfg = SyntheticConfig::desk_scale(3, 7, 3);
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let rr = ds.batch.reversed().reversed();
        assert_eq!(rr.mask(), ds.batch.mask());
        assert_eq!(rr.values(), ds.batch.values());
        for (a, b) in rr.timestamps().iter().zip(ds.batch.timestamps()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
