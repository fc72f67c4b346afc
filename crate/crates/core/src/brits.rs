//! Recurrent imputation backbone: temporal decay, history and feature
//! regression, a learned blend of the two, observed-cell pass-through and a
//! GRU update, unrolled in both directions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numcore::layers::{BoundGru, BoundLinear, GruCell, Linear};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::tsdata::{Dims, TimeSeriesBatch};

/// What the gate and the recurrent cell see besides the hidden state.
///
/// `Product` feeds `gamma_f * m` to the gate and `C * m` to the GRU.
/// `Concat` feeds `[gamma_f, m]` and `[C, m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrentInput {
    #[default]
    Product,
    Concat,
}

impl RecurrentInput {
    fn width(self, d: usize) -> usize {
        match self {
            Self::Product => d,
            Self::Concat => 2 * d,
        }
    }
}

impl fmt::Display for RecurrentInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Product => "product",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for RecurrentInput {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "product" => Ok(Self::Product),
            "concat" => Ok(Self::Concat),
            _ => Err(invalid(format!("unknown recurrent input {s:?} (product | concat)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Parameters of one direction's cell.
#[derive(Debug, Clone)]
pub struct BritsCellParams {
    pub d_features: usize,
    pub d_hidden: usize,
    pub recurrent_input: RecurrentInput,
    /// `W_gh, b_gh`: delta to hidden decay.
    pub decay_hidden: Linear,
    /// `W_x, b_x`: hidden state to history estimate.
    pub history: Linear,
    /// `W_z, b_z`: feature regression, diagonal held at zero.
    pub feature: Linear,
    /// `W_gf, b_gf`: delta to feature decay.
    pub decay_feature: Linear,
    /// `W_b, b_b`: blend gate.
    pub gate: Linear,
    pub gru: GruCell,
}

impl BritsCellParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_features: usize,
        d_hidden: usize,
        recurrent_input: RecurrentInput,
        rng: &mut impl Rng,
    ) -> Self {
        let d = d_features;
        let in_w = recurrent_input.width(d);
        let p = Self {
            d_features,
            d_hidden,
            recurrent_input,
            decay_hidden: Linear::new(store, &format!("{name}.decay_h"), d, d_hidden, true, rng),
            history: Linear::new(store, &format!("{name}.hist"), d_hidden, d, true, rng),
            feature: Linear::new(store, &format!("{name}.feat"), d, d, true, rng),
            decay_feature: Linear::new(store, &format!("{name}.decay_f"), d, d, true, rng),
            gate: Linear::new(store, &format!("{name}.gate"), in_w, d, true, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), in_w, d_hidden, rng),
        };
        p.project_zero_diagonal(store);
        p
    }

    /// Zero the diagonal of `W_z`; run after every optimizer step.
    pub fn project_zero_diagonal(&self, store: &mut ParamStore) {
        let d = self.d_features;
        let w = store.value_mut(self.feature.w).data_mut();
        for i in 0..d {
            w[i * d + i] = 0.0;
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundCell> {
        let d = self.d_features;
        let feature = self.feature.bind(tape, store);
        let off_diag = Tensor::new(
            vec![d, d],
            (0..d * d).map(|i| if i / d == i % d { 0.0 } else { 1.0 }).collect(),
        )?;
        let off_diag = tape.constant(off_diag);
        let wz = tape.mul(feature.w, off_diag)?;
        Ok(BoundCell {
            d_features: d,
            d_hidden: self.d_hidden,
            recurrent_input: self.recurrent_input,
            decay_hidden: self.decay_hidden.bind(tape, store),
            history: self.history.bind(tape, store),
            feature: BoundLinear { w: wz, b: feature.b },
            decay_feature: self.decay_feature.bind(tape, store),
            gate: self.gate.bind(tape, store),
            gru: self.gru.bind(tape, store),
        })
    }
}

/// A cell whose parameters are on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    pub d_features: usize,
    pub d_hidden: usize,
    recurrent_input: RecurrentInput,
    decay_hidden: BoundLinear,
    history: BoundLinear,
    feature: BoundLinear,
    decay_feature: BoundLinear,
    gate: BoundLinear,
    gru: BoundGru,
}

/// Every intermediate of one step, each `[N x dim]`.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub gamma_h: Var,
    pub h_decayed: Var,
    pub x_hat: Var,
    pub x_hc: Var,
    pub x_fc: Var,
    pub gamma_f: Var,
    pub beta: Var,
    pub x_c: Var,
    pub completed: Var,
    pub h: Var,
}

/// `exp(-max(0, lin(delta)))` on the tape.
fn decay(tape: &mut Tape, lin: &BoundLinear, delta: Var) -> Result<Var> {
    let z = lin.forward(tape, delta)?;
    let z = tape.relu(z);
    let z = tape.scale(z, -1.0);
    Ok(tape.exp(z))
}

fn check_binary(mask: &[f64]) -> Result<()> {
    match mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        Some(m) => Err(invalid(format!("mask entries must be 0 or 1, found {m}"))),
        None => Ok(()),
    }
}

impl BoundCell {
    /// One step on `[N x D]` inputs.
    pub fn step(&self, tape: &mut Tape, h_prev: Var, x: &Tensor, m: &Tensor, delta: &Tensor) -> Result<StepVars> {
        let d = self.d_features;
        if x.shape() != m.shape() || x.shape() != delta.shape() || x.last_dim() != d {
            return Err(shape(format!(
                "step inputs {:?}, {:?}, {:?} for {d} features",
                x.shape(),
                m.shape(),
                delta.shape()
            )));
        }
        check_binary(m.data())?;
        let observed = tape.constant(x.zip_map(m, |xv, mv| xv * mv));
        let missing = tape.constant(m.map(|mv| 1.0 - mv));
        let mv = tape.constant(m.clone());
        let dv = tape.constant(delta.clone());

        let gamma_h = decay(tape, &self.decay_hidden, dv)?;
        let h_decayed = tape.mul(h_prev, gamma_h)?;
        let x_hat = self.history.forward(tape, h_decayed)?;
        let fill = tape.mul(missing, x_hat)?;
        let x_hc = tape.add(observed, fill)?;
        let x_fc = self.feature.forward(tape, x_hc)?;
        let gamma_f = decay(tape, &self.decay_feature, dv)?;
        let gate_in = match self.recurrent_input {
            RecurrentInput::Product => tape.mul(gamma_f, mv)?,
            RecurrentInput::Concat => tape.concat(&[gamma_f, mv], 1)?,
        };
        let beta = self.gate.forward(tape, gate_in)?;
        let beta = tape.sigmoid(beta);
        let diff = tape.sub(x_fc, x_hc)?;
        let blend = tape.mul(beta, diff)?;
        let x_c = tape.add(x_hc, blend)?;
        let fill = tape.mul(missing, x_c)?;
        let completed = tape.add(observed, fill)?;
        let rnn_in = match self.recurrent_input {
            RecurrentInput::Product => tape.mul(completed, mv)?,
            RecurrentInput::Concat => tape.concat(&[completed, mv], 1)?,
        };
        let h = self.gru.step(tape, h_decayed, rnn_in)?;
        Ok(StepVars {
            gamma_h,
            h_decayed,
            x_hat,
            x_hc,
            x_fc,
            gamma_f,
            beta,
            x_c,
            completed,
            h,
        })
    }
}

/// Plain-value results of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub h: Tensor,
    pub x_hat: Tensor,
    pub x_fc: Tensor,
    pub x_c: Tensor,
    pub completed: Tensor,
    pub beta: Tensor,
    pub gamma_h: Tensor,
    pub gamma_f: Tensor,
}

/// Evaluate one step outside of training.
pub fn brits_cell_step(
    store: &ParamStore,
    params: &BritsCellParams,
    h_prev: &Tensor,
    x: &Tensor,
    m: &Tensor,
    delta: &Tensor,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let cell = params.bind(&mut tape, store)?;
    let h0 = tape.constant(h_prev.clone());
    let s = cell.step(&mut tape, h0, x, m, delta)?;
    let get = |v: Var| tape.value(v).clone();
    Ok(StepOutput {
        h: get(s.h),
        x_hat: get(s.x_hat),
        x_fc: get(s.x_fc),
        x_c: get(s.x_c),
        completed: get(s.completed),
        beta: get(s.beta),
        gamma_h: get(s.gamma_h),
        gamma_f: get(s.gamma_f),
    })
}

/// `exp(-max(0, delta W + b))` for `delta [N x D]`, `W [D x out]`.
pub fn temporal_decay(delta: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if delta.data().iter().any(|&x| x < 0.0) {
        return Err(invalid("time gaps must be nonnegative"));
    }
    let mut tape = Tape::new();
    let lin = BoundLinear {
        w: tape.constant(w.clone()),
        b: Some(tape.constant(b.clone())),
    };
    let dv = tape.constant(delta.clone());
    let g = decay(&mut tape, &lin, dv)?;
    Ok(tape.value(g).clone())
}

/// One `[N x D]` slice per step, in the order a direction visits them.
#[derive(Debug, Clone)]
pub struct StepTensors {
    pub x: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub delta: Vec<Tensor>,
}

impl StepTensors {
    pub fn from_batch(batch: &TimeSeriesBatch) -> Self {
        let dims = batch.dims();
        let cut = |src: &[f64]| -> Vec<Tensor> {
            (0..dims.t).map(|k| step_slice(dims, src, k)).collect()
        };
        Self {
            x: cut(batch.values()),
            m: cut(batch.mask()),
            delta: cut(batch.delta()),
        }
    }
}

fn step_slice(dims: Dims, src: &[f64], k: usize) -> Tensor {
    let mut out = Vec::with_capacity(dims.n * dims.d);
    for s in 0..dims.n {
        let at = dims.idx(s, k, 0);
        out.extend_from_slice(&src[at..at + dims.d]);
    }
    Tensor::new(vec![dims.n, dims.d], out).expect("step slice shape")
}

/// Per-step variables of one direction, indexed by forward time.
#[derive(Debug, Clone)]
pub struct DirectionTrace {
    pub steps: Vec<StepVars>,
    pub h_final: Var,
}

/// Run one direction over `batch`. The backward direction walks the
/// time-reversed batch (gaps recomputed from reversed timestamps); its steps
/// are returned re-indexed by forward time.
pub fn unroll_direction(
    tape: &mut Tape,
    cell: &BoundCell,
    batch: &TimeSeriesBatch,
    h_init: Var,
    direction: Direction,
) -> Result<DirectionTrace> {
    let view = match direction {
        Direction::Forward => StepTensors::from_batch(batch),
        Direction::Backward => StepTensors::from_batch(&batch.reversed()),
    };
    unroll_steps(tape, cell, &view, h_init, direction)
}

/// As [`unroll_direction`] with the step slices already cut (and already
/// reversed for the backward direction).
pub fn unroll_steps(
    tape: &mut Tape,
    cell: &BoundCell,
    steps: &StepTensors,
    h_init: Var,
    direction: Direction,
) -> Result<DirectionTrace> {
    let hs = tape.value(h_init).shape().to_vec();
    let n = steps.x.first().map_or(0, |x| x.shape()[0]);
    if hs != [n, cell.d_hidden] {
        return Err(shape(format!("initial hidden state {hs:?}, expected [{n}, {}]", cell.d_hidden)));
    }
    let mut h = h_init;
    let mut out = Vec::with_capacity(steps.x.len());
    for k in 0..steps.x.len() {
        let s = cell.step(tape, h, &steps.x[k], &steps.m[k], &steps.delta[k])?;
        h = s.h;
        out.push(s);
    }
    if direction == Direction::Backward {
        out.reverse();
    }
    Ok(DirectionTrace { steps: out, h_final: h })
}

/// Stack per-step `[N x D]` variables into `[N x T x D]`.
pub fn stack_steps(tape: &mut Tape, steps: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(steps.len());
    for &v in steps {
        let s = tape.value(v).shape().to_vec();
        if s.len() != 2 {
            return Err(shape(format!("stack_steps expects [N x D], got {s:?}")));
        }
        parts.push(tape.reshape(v, vec![s[0], 1, s[1]])?);
    }
    tape.concat(&parts, 1)
}

/// Both directions and their merge, all `[N x T x D]` except hidden states.
#[derive(Debug, Clone)]
pub struct BidirectionalTrace {
    pub fwd: DirectionTrace,
    pub bwd: DirectionTrace,
    /// Per-direction stacked estimates: history, feature, combined.
    pub fwd_estimates: [Var; 3],
    pub bwd_estimates: [Var; 3],
    /// Mean of the two combined estimates.
    pub imputation: Var,
    /// Observed values where present, `imputation` elsewhere.
    pub completed: Var,
    /// Mean absolute gap between the two combined estimates.
    pub consistency: Var,
}

fn stack_estimates(tape: &mut Tape, trace: &DirectionTrace) -> Result<[Var; 3]> {
    let pick = |f: fn(&StepVars) -> Var| trace.steps.iter().map(f).collect::<Vec<_>>();
    let (a, b, c) = (pick(|s| s.x_hat), pick(|s| s.x_fc), pick(|s| s.x_c));
    Ok([stack_steps(tape, &a)?, stack_steps(tape, &b)?, stack_steps(tape, &c)?])
}

/// Unroll both directions from the given initial states and merge them.
pub fn run_bidirectional(
    tape: &mut Tape,
    fwd_cell: &BoundCell,
    bwd_cell: &BoundCell,
    batch: &TimeSeriesBatch,
    reversed: &TimeSeriesBatch,
    h_fwd: Var,
    h_bwd: Var,
) -> Result<BidirectionalTrace> {
    let fwd = unroll_steps(tape, fwd_cell, &StepTensors::from_batch(batch), h_fwd, Direction::Forward)?;
    let bwd = unroll_steps(tape, bwd_cell, &StepTensors::from_batch(reversed), h_bwd, Direction::Backward)?;
    let fwd_estimates = stack_estimates(tape, &fwd)?;
    let bwd_estimates = stack_estimates(tape, &bwd)?;
    let (cf, cb) = (fwd_estimates[2], bwd_estimates[2]);
    let sum = tape.add(cf, cb)?;
    let imputation = tape.scale(sum, 0.5);
    let dims = batch.dims();
    let observed = Tensor::new(
        vec![dims.n, dims.t, dims.d],
        batch.values().iter().zip(batch.mask()).map(|(x, m)| x * m).collect(),
    )?;
    let missing = Tensor::new(vec![dims.n, dims.t, dims.d], batch.mask().iter().map(|m| 1.0 - m).collect())?;
    let observed = tape.constant(observed);
    let missing = tape.constant(missing);
    let fill = tape.mul(missing, imputation)?;
    let completed = tape.add(observed, fill)?;
    let gap = tape.sub(cf, cb)?;
    let gap = tape.abs(gap);
    let gap = tape.sum(gap);
    let consistency = tape.scale(gap, 1.0 / dims.cells().max(1) as f64);
    Ok(BidirectionalTrace {
        fwd,
        bwd,
        fwd_estimates,
        bwd_estimates,
        imputation,
        completed,
        consistency,
    })
}

/// Merged imputation of two aligned directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub imputation: Vec<f64>,
    pub completed: Vec<f64>,
    pub consistency: f64,
}

/// Average two directions' combined estimates (both in forward time order),
/// pass observed cells through and report the mean absolute disagreement.
pub fn merge_bidirectional(fwd: &[f64], bwd: &[f64], values: &[f64], mask: &[f64]) -> Result<Merged> {
    if fwd.len() != bwd.len() || fwd.len() != values.len() || fwd.len() != mask.len() {
        return Err(shape(format!(
            "merge over {} forward, {} backward, {} value and {} mask cells",
            fwd.len(),
            bwd.len(),
            values.len(),
            mask.len()
        )));
    }
    let imputation: Vec<f64> = fwd.iter().zip(bwd).map(|(a, b)| (a + b) * 0.5).collect();
    let completed = imputation
        .iter()
        .zip(values.iter().zip(mask))
        .map(|(&e, (&x, &m))| x * m + (1.0 - m) * e)
        .collect();
    let consistency = if fwd.is_empty() {
        0.0
    } else {
        fwd.iter().zip(bwd).map(|(a, b)| (a - b).abs()).sum::<f64>() / fwd.len() as f64
    };
    Ok(Merged {
        imputation,
        completed,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_store(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    fn t2(n: usize, d: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![n, d], v.to_vec()).unwrap()
    }

    #[test]
    fn decay_examples() {
        let w = Tensor::zeros(&[2, 2]);
        let g = temporal_decay(&t2(1, 2, &[3.0, 0.5]), &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
        let g = temporal_decay(&t2(1, 2, &[0.0, 0.0]), &w, &Tensor::new(vec![2], vec![-3.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!((g.data()[1] - (-2.0f64).exp()).abs() < 1e-15);
        assert!(temporal_decay(&t2(1, 2, &[-1.0, 0.0]), &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn degenerate_weights() {
        let mut store = ParamStore::new();
        let p = BritsCellParams::new(&mut store, "c", 2, 3, RecurrentInput::Product, &mut seeded(1));
        zero_store(&mut store);
        let bx = store.value_mut(p.history.b.unwrap());
        bx.data_mut().copy_from_slice(&[0.7, -0.2]);
        let out = brits_cell_step(
            &store,
            &p,
            &Tensor::zeros(&[1, 3]),
            &t2(1, 2, &[5.0, 6.0]),
            &t2(1, 2, &[0.0, 0.0]),
            &t2(1, 2, &[1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(out.x_hat.data(), &[0.7, -0.2]);
        // zero W_z and zero b_z give x_fc = 0, gate 0.5
        assert_eq!(out.x_c.data(), &[0.35, -0.1]);
    }

    #[test]
    fn all_observed_passes_through_and_mask_is_checked() {
        let mut store = ParamStore::new();
        let p = BritsCellParams::new(&mut store, "c", 3, 4, RecurrentInput::Concat, &mut seeded(2));
        let x = t2(2, 3, &[1.5, -2.0, 0.25, 9.0, 3.0, -7.5]);
        let h = Tensor::full(&[2, 4], 0.3);
        let out = brits_cell_step(&store, &p, &h, &x, &Tensor::full(&[2, 3], 1.0), &Tensor::full(&[2, 3], 1.0)).unwrap();
        assert_eq!(out.completed, x);
        let bad = t2(2, 3, &[1.0, 0.5, 0.0, 1.0, 1.0, 1.0]);
        assert!(brits_cell_step(&store, &p, &h, &x, &bad, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn feature_regression_ignores_own_input() {
        let mut store = ParamStore::new();
        let p = BritsCellParams::new(&mut store, "c", 3, 2, RecurrentInput::Product, &mut seeded(3));
        let run = |x0: f64| {
            let x = t2(1, 3, &[x0, 1.0, -1.0]);
            brits_cell_step(&store, &p, &Tensor::zeros(&[1, 2]), &x, &Tensor::full(&[1, 3], 1.0), &Tensor::zeros(&[1, 3]))
                .unwrap()
                .x_fc
        };
        let (a, b) = (run(0.0), run(50.0));
        assert_eq!(a.data()[0], b.data()[0]);
        assert_ne!(a.data()[1], b.data()[1]);
    }

    #[test]
    fn diagonal_projection_survives_gradient_updates() {
        let mut store = ParamStore::new();
        let p = BritsCellParams::new(&mut store, "c", 3, 2, RecurrentInput::Product, &mut seeded(4));
        store.value_mut(p.feature.w).data_mut().fill(1.0);
        p.project_zero_diagonal(&mut store);
        let w = store.value(p.feature.w).data();
        assert_eq!((w[0], w[4], w[8]), (0.0, 0.0, 0.0));
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn merge_arithmetic() {
        let m = merge_bidirectional(&[1.0, 4.0], &[3.0, 4.0], &[0.0, 10.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.imputation, vec![2.0, 4.0]);
        assert_eq!(m.completed, vec![2.0, 10.0]);
        assert_eq!(m.consistency, 1.0);
        let same = merge_bidirectional(&[0.5; 4], &[0.5; 4], &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(same.consistency, 0.0);
        assert!(merge_bidirectional(&[1.0], &[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn recurrent_input_parses() {
        assert_eq!("Concat".parse::<RecurrentInput>().unwrap(), RecurrentInput::Concat);
        assert!("sum".parse::<RecurrentInput>().is_err());
        assert_eq!(RecurrentInput::default().to_string(), "product");
    }
}
