//! Median-anchored decay attention, the transformer-based conditional
//! hidden-state initializer, and the full bidirectional model with its
//! classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brits::{run_bidirectional, BidirectionalTrace, BritsCellParams, Direction, RecurrentInput};
use crate::error::{invalid, shape, Result};
use crate::numcore::layers::{BoundConv1d, BoundLinear, BoundTransformer, Conv1d, Linear, TransformerBlock};
use crate::numcore::{positional_encoding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::seeded;
use crate::tsdata::{MedianGaps, TimeSeriesBatch};

/// Model hyperparameters and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsaiConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    /// Off: both directions start from zeros (plain bidirectional BRITS).
    pub hidden_init: bool,
    /// Use the signed form `exp(-a (delta - tau))` instead of the even one.
    pub literal_decay: bool,
    pub decay_eps: f64,
    pub recurrent_input: RecurrentInput,
}

impl Default for CsaiConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_hidden: 108,
            hidden_init: true,
            literal_decay: false,
            decay_eps: 1e-8,
            recurrent_input: RecurrentInput::Product,
        }
    }
}

impl CsaiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(invalid(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_hidden == 0 {
            return Err(invalid("d_hidden must be positive"));
        }
        if !(self.decay_eps > 0.0) {
            return Err(invalid("decay_eps must be positive"));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `s(u) = sqrt(u^2 + eps)`, or `u` itself for the literal form.
fn gap_magnitude(u: f64, eps: f64, literal: bool) -> f64 {
    if literal {
        u
    } else {
        (u * u + eps).sqrt()
    }
}

/// Learnable per-feature decay rate `alpha = softplus(a)`.
#[derive(Debug, Clone)]
pub struct DecayAttentionParams {
    pub raw_rate: ParamId,
    pub eps: f64,
    pub literal: bool,
}

impl DecayAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64, literal: bool) -> Self {
        Self {
            raw_rate: store.add(&format!("{name}.rate"), Tensor::zeros(&[d])),
            eps,
            literal,
        }
    }

    pub fn alpha(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.raw_rate).data().iter().map(|&a| softplus(a)).collect()
    }

    /// `A = exp(-alpha * s(delta - tau))` on the tape, `delta [N x T x D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, delta: &Tensor, tau: &[f64]) -> Result<Var> {
        let d = delta.last_dim();
        if tau.len() != d {
            return Err(shape(format!("{} reference gaps for {d} features", tau.len())));
        }
        let mut gaps = delta.clone();
        for (i, g) in gaps.data_mut().iter_mut().enumerate() {
            *g = gap_magnitude(*g - tau[i % d], self.eps, self.literal);
        }
        let raw = tape.param(store, self.raw_rate);
        let alpha = tape.softplus(raw);
        let gaps = tape.constant(gaps);
        let z = tape.mul_bias(gaps, alpha)?;
        let z = tape.scale(z, -1.0);
        Ok(tape.exp(z))
    }
}

/// Plain evaluation of the decay attention for a fixed rate vector.
pub fn adjusted_decay_attention(
    delta: &[f64],
    tau: &[f64],
    alpha: &[f64],
    eps: f64,
    literal: bool,
) -> Result<Vec<f64>> {
    let d = tau.len();
    if d == 0 || alpha.len() != d || delta.len() % d != 0 {
        return Err(shape(format!(
            "{} gaps, {} reference gaps, {} rates",
            delta.len(),
            d,
            alpha.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    if let Some(&a) = alpha.iter().find(|&&a| a < 0.0) {
        return Err(invalid(format!("decay rate must be nonnegative, got {a}")));
    }
    Ok(delta
        .iter()
        .enumerate()
        .map(|(i, &x)| (-alpha[i % d] * gap_magnitude(x - tau[i % d], eps, literal)).exp())
        .collect())
}

/// Shared initializer layers: input projection, positional table,
/// transformer block and the two convolutions.
#[derive(Debug, Clone)]
pub struct HiddenInit {
    pub input_proj: Linear,
    pub transformer: TransformerBlock,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub positions: Tensor,
}

/// [`HiddenInit`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundHiddenInit {
    input_proj: BoundLinear,
    transformer: BoundTransformer,
    conv1: BoundConv1d,
    conv2: BoundConv1d,
    positions: Var,
    d_hidden: usize,
}

impl HiddenInit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_steps: usize,
        n_features: usize,
        config: &CsaiConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (dm, h) = (config.d_model, config.d_hidden);
        Ok(Self {
            input_proj: Linear::new(store, &format!("{name}.proj"), n_features, dm, true, rng),
            transformer: TransformerBlock::new(store, &format!("{name}.encoder"), dm, config.n_heads, rng)?,
            conv1: Conv1d::new(store, &format!("{name}.conv1"), 1, dm, h, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), 2 * n_steps, h, h, rng),
            positions: positional_encoding(n_steps, dm)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundHiddenInit {
        BoundHiddenInit {
            input_proj: self.input_proj.bind(tape, store),
            transformer: self.transformer.bind(tape, store),
            conv1: self.conv1.bind(tape, store),
            conv2: self.conv2.bind(tape, store),
            positions: tape.constant(self.positions.clone()),
            d_hidden: store.value(self.conv2.bias).len(),
        }
    }
}

/// `h_init [N x d_hidden]` from last observations and decay attention,
/// both `[N x T x D]`.
pub fn conditional_hidden_init(tape: &mut Tape, init: &BoundHiddenInit, last_obs: Var, attention: Var) -> Result<Var> {
    let (ls, as_) = (tape.value(last_obs).shape().to_vec(), tape.value(attention).shape().to_vec());
    if ls != as_ || ls.len() != 3 {
        return Err(shape(format!("last observations {ls:?} vs attention {as_:?}")));
    }
    let x = init.input_proj.forward(tape, last_obs)?;
    let x = tape.add_bias(x, init.positions)?;
    let a = init.input_proj.forward(tape, attention)?;
    let a = tape.add_bias(a, init.positions)?;
    let c_in = tape.concat(&[x, a], 1)?;
    let c_out = init.transformer.forward(tape, c_in)?;
    let h1 = init.conv1.forward(tape, c_out)?;
    let h = init.conv2.forward(tape, h1)?;
    tape.reshape(h, vec![ls[0], init.d_hidden])
}

/// Probability from the logit of each sample.
pub fn classify(h_fwd: &Tensor, h_bwd: &Tensor, w: &Tensor, b: f64) -> Result<Vec<f64>> {
    let (fs, bs) = (h_fwd.shape(), h_bwd.shape());
    if fs.len() != 2 || fs != bs || w.len() != 2 * fs[1] {
        return Err(shape(format!("classifier on {fs:?} and {bs:?} with {} weights", w.len())));
    }
    let hd = fs[1];
    Ok((0..fs[0])
        .map(|n| {
            let f = &h_fwd.data()[n * hd..(n + 1) * hd];
            let g = &h_bwd.data()[n * hd..(n + 1) * hd];
            let logit = b + f.iter().chain(g).zip(w.data()).map(|(x, w)| x * w).sum::<f64>();
            sigmoid(logit)
        })
        .collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The complete model. Parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CsaiModel {
    pub config: CsaiConfig,
    pub n_steps: usize,
    pub n_features: usize,
    tau: Option<Vec<f64>>,
    pub init: HiddenInit,
    pub fwd: BritsCellParams,
    pub bwd: BritsCellParams,
    pub decay_fwd: DecayAttentionParams,
    pub decay_bwd: DecayAttentionParams,
    pub classifier: Linear,
}

/// Graph of one forward pass.
#[derive(Debug, Clone)]
pub struct CsaiGraph {
    pub trace: BidirectionalTrace,
    /// `[N x 1]`.
    pub logits: Var,
    pub h_init: Option<(Var, Var)>,
}

/// Plain results of a forward pass, all cell arrays in `[N x T x D]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub imputation: Vec<f64>,
    pub completed: Vec<f64>,
    /// History, feature and combined estimates for the forward then the
    /// backward direction.
    pub estimates: [[Vec<f64>; 3]; 2],
    pub h_fwd: Tensor,
    pub h_bwd: Tensor,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub consistency: f64,
}

impl CsaiModel {
    /// Register all parameters in `store` with seeded uniform init.
    pub fn new(
        config: CsaiConfig,
        n_steps: usize,
        n_features: usize,
        tau: Option<&MedianGaps>,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_steps == 0 || n_features == 0 {
            return Err(invalid("model needs at least one step and one feature"));
        }
        if let Some(t) = tau {
            if t.tau.len() != n_features {
                return Err(shape(format!("{} reference gaps for {n_features} features", t.tau.len())));
            }
        }
        let mut rng = seeded(seed);
        let (d, h, ri) = (n_features, config.d_hidden, config.recurrent_input);
        let init = HiddenInit::new(store, "init", n_steps, d, &config, &mut rng)?;
        let fwd = BritsCellParams::new(store, "fwd", d, h, ri, &mut rng);
        let bwd = BritsCellParams::new(store, "bwd", d, h, ri, &mut rng);
        let decay_fwd = DecayAttentionParams::new(store, "fwd.attn", d, config.decay_eps, config.literal_decay);
        let decay_bwd = DecayAttentionParams::new(store, "bwd.attn", d, config.decay_eps, config.literal_decay);
        let classifier = Linear::new(store, "classifier", 2 * h, 1, true, &mut rng);
        Ok(Self {
            config,
            n_steps,
            n_features,
            tau: tau.map(|t| t.tau.clone()),
            init,
            fwd,
            bwd,
            decay_fwd,
            decay_bwd,
            classifier,
        })
    }

    /// Build the model and a fresh parameter store.
    pub fn init(
        config: CsaiConfig,
        n_steps: usize,
        n_features: usize,
        tau: Option<&MedianGaps>,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, n_steps, n_features, tau, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn tau(&self) -> Option<&[f64]> {
        self.tau.as_deref()
    }

    /// Re-apply parameter constraints after an optimizer step.
    pub fn project(&self, store: &mut ParamStore) {
        self.fwd.project_zero_diagonal(store);
        self.bwd.project_zero_diagonal(store);
    }

    fn check_batch(&self, batch: &TimeSeriesBatch) -> Result<()> {
        let dims = batch.dims();
        if dims.t != self.n_steps || dims.d != self.n_features {
            return Err(shape(format!(
                "batch has {} steps x {} features, model expects {} x {}",
                dims.t, dims.d, self.n_steps, self.n_features
            )));
        }
        if dims.n == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }

    fn direction_init(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        init: &BoundHiddenInit,
        batch: &TimeSeriesBatch,
        direction: Direction,
    ) -> Result<Var> {
        let tau = self
            .tau
            .as_deref()
            .ok_or_else(|| invalid("reference gaps are required for the conditional initializer"))?;
        let dims = batch.dims();
        let full = |v: &[f64]| Tensor::new(vec![dims.n, dims.t, dims.d], v.to_vec());
        let decay = match direction {
            Direction::Forward => &self.decay_fwd,
            Direction::Backward => &self.decay_bwd,
        };
        let attention = decay.forward(tape, store, &full(batch.delta())?, tau)?;
        let last_obs = tape.constant(full(batch.last_obs())?);
        conditional_hidden_init(tape, init, last_obs, attention)
    }

    /// Build the forward graph on `tape`.
    pub fn graph(&self, tape: &mut Tape, store: &ParamStore, batch: &TimeSeriesBatch) -> Result<CsaiGraph> {
        self.check_batch(batch)?;
        let n = batch.dims().n;
        let reversed = batch.reversed();
        let (h_fwd, h_bwd, h_init) = if self.config.hidden_init {
            let init = self.init.bind(tape, store);
            let f = self.direction_init(tape, store, &init, batch, Direction::Forward)?;
            let b = self.direction_init(tape, store, &init, &reversed, Direction::Backward)?;
            (f, b, Some((f, b)))
        } else {
            let zeros = Tensor::zeros(&[n, self.config.d_hidden]);
            (tape.constant(zeros.clone()), tape.constant(zeros), None)
        };
        let fwd = self.fwd.bind(tape, store)?;
        let bwd = self.bwd.bind(tape, store)?;
        let trace = run_bidirectional(tape, &fwd, &bwd, batch, &reversed, h_fwd, h_bwd)?;
        let head = self.classifier.bind(tape, store);
        let finals = tape.concat(&[trace.fwd.h_final, trace.bwd.h_final], 1)?;
        let logits = head.forward(tape, finals)?;
        Ok(CsaiGraph { trace, logits, h_init })
    }

    /// Evaluate without keeping the graph.
    pub fn forward(&self, store: &ParamStore, batch: &TimeSeriesBatch) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, store, batch)?;
        Ok(extract_output(&tape, &g))
    }

    /// Initial hidden states of both directions, zeros when switched off.
    pub fn hidden_init_values(&self, store: &ParamStore, batch: &TimeSeriesBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, store, batch)?;
        Ok(match g.h_init {
            Some((f, b)) => (tape.value(f).clone(), tape.value(b).clone()),
            None => {
                let z = Tensor::zeros(&[batch.dims().n, self.config.d_hidden]);
                (z.clone(), z)
            }
        })
    }
}

/// Copy plain values out of a built graph.
pub fn extract_output(tape: &Tape, g: &CsaiGraph) -> ModelOutput {
    let vals = |v: Var| tape.value(v).data().to_vec();
    let t = &g.trace;
    let logits = vals(g.logits);
    ModelOutput {
        imputation: vals(t.imputation),
        completed: vals(t.completed),
        estimates: [t.fwd_estimates.map(vals), t.bwd_estimates.map(vals)],
        h_fwd: tape.value(t.fwd.h_final).clone(),
        h_bwd: tape.value(t.bwd.h_final).clone(),
        scores: logits.iter().map(|&l| sigmoid(l)).collect(),
        logits,
        consistency: tape.value(t.consistency).item(),
    }
}
