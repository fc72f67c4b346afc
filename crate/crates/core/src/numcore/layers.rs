//! Parameterized layers. Each layer registers its parameters in a
//! [`ParamStore`]; `bind` places them on a [`Tape`] once per forward pass and
//! the bound form is then applied as often as needed.

use rand::Rng;

use crate::error::{invalid, shape, Result};
use crate::numcore::params::{ParamId, ParamStore};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Sinusoidal table `[steps x d_model]`:
/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding(steps: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(invalid(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut data = vec![0.0; steps * d_model];
    for t in 0..steps {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = angle.sin();
            data[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![steps, d_model], data)
}

/// `y = x W + b` with `W` stored `[in x out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.add_uniform(&format!("{name}.b"), &[d_out], d_in, rng));
        Self { w, b }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: tape.param(store, self.w),
            b: self.b.map(|b| tape.param(store, b)),
        }
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add_bias(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[width])),
            eps: 1e-5,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: tape.param(store, self.gamma),
            beta: tape.param(store, self.beta),
            eps: self.eps,
        }
    }
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, self.eps)
    }
}

/// Scaled dot-product attention over `n_heads` heads with an output
/// projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
pub struct BoundAttention {
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    output: BoundLinear,
    n_heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(invalid(format!("d_model {d_model} is not divisible by {n_heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            n_heads,
            d_model,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundAttention {
        BoundAttention {
            query: self.query.bind(tape, store),
            key: self.key.bind(tape, store),
            value: self.value.bind(tape, store),
            output: self.output.bind(tape, store),
            n_heads: self.n_heads,
            d_model: self.d_model,
        }
    }
}

impl BoundAttention {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }

    /// Output plus each head's `[N, L, L]` attention weights.
    pub fn forward_with_weights(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = tape.value(x).shape();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(shape(format!("attention input {s:?}, d_model {}", self.d_model)));
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let dk = self.d_model / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice(q, 2, h * dk, dk)?;
            let kh = tape.slice(k, 2, h * dk, dk)?;
            let vh = tape.slice(v, 2, h * dk, dk)?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores);
            heads.push(tape.batch_matmul(p, vh, false)?);
            weights.push(p);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        Ok((self.output.forward(tape, cat)?, weights))
    }
}

/// Two affine maps with a ReLU between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_inner: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.1"), d_model, d_inner, true, rng),
            outer: Linear::new(store, &format!("{name}.2"), d_inner, d_model, true, rng),
        }
    }
}

/// `LN(FFN(LN(MSA(x))))`, no residual connections.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct BoundTransformer {
    attention: BoundAttention,
    norm1: BoundLayerNorm,
    inner: BoundLinear,
    outer: BoundLinear,
    norm2: BoundLayerNorm,
}

impl TransformerBlock {
    /// FFN inner width is `4 * d_model`.
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.msa"), d_model, n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, 4 * d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundTransformer {
        BoundTransformer {
            attention: self.attention.bind(tape, store),
            norm1: self.norm1.bind(tape, store),
            inner: self.ffn.inner.bind(tape, store),
            outer: self.ffn.outer.bind(tape, store),
            norm2: self.norm2.bind(tape, store),
        }
    }
}

impl BoundTransformer {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.attention.forward(tape, x)?;
        let a = self.norm1.forward(tape, a)?;
        let f = self.inner.forward(tape, a)?;
        let f = tape.relu(f);
        let f = self.outer.forward(tape, f)?;
        self.norm2.forward(tape, f)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv1d {
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = width * c_in;
        Self {
            kernel: store.add_uniform(&format!("{name}.kernel"), &[width, c_in, c_out], fan_in, rng),
            bias: store.add_uniform(&format!("{name}.bias"), &[c_out], fan_in, rng),
            stride: 1,
            padding: 0,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundConv1d {
        BoundConv1d {
            kernel: tape.param(store, self.kernel),
            bias: tape.param(store, self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl BoundConv1d {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv1d(x, self.kernel, self.bias, self.stride, self.padding)
    }
}

/// Gated recurrent unit:
/// `r = s(x W_ir + b_ir + h W_hr + b_hr)`, `z` likewise,
/// `n = tanh(x W_in + b_in + r * (h W_hn + b_hn))`, `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_reset: Linear,
    pub input_update: Linear,
    pub input_new: Linear,
    pub hidden_reset: Linear,
    pub hidden_update: Linear,
    pub hidden_new: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    ir: BoundLinear,
    iz: BoundLinear,
    in_: BoundLinear,
    hr: BoundLinear,
    hz: BoundLinear,
    hn: BoundLinear,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |part: &str, d: usize| Linear::new(store, &format!("{name}.{part}"), d, d_hidden, true, rng);
        Self {
            input_reset: lin("ir", d_in),
            input_update: lin("iz", d_in),
            input_new: lin("in", d_in),
            hidden_reset: lin("hr", d_hidden),
            hidden_update: lin("hz", d_hidden),
            hidden_new: lin("hn", d_hidden),
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundGru {
        BoundGru {
            ir: self.input_reset.bind(tape, store),
            iz: self.input_update.bind(tape, store),
            in_: self.input_new.bind(tape, store),
            hr: self.hidden_reset.bind(tape, store),
            hz: self.hidden_update.bind(tape, store),
            hn: self.hidden_new.bind(tape, store),
        }
    }
}

impl BoundGru {
    pub fn step(&self, tape: &mut Tape, h_prev: Var, x: Var) -> Result<Var> {
        let a = self.ir.forward(tape, x)?;
        let b = self.hr.forward(tape, h_prev)?;
        let r = tape.add(a, b)?;
        let r = tape.sigmoid(r);
        let a = self.iz.forward(tape, x)?;
        let b = self.hz.forward(tape, h_prev)?;
        let z = tape.add(a, b)?;
        let z = tape.sigmoid(z);
        let a = self.in_.forward(tape, x)?;
        let b = self.hn.forward(tape, h_prev)?;
        let rb = tape.mul(r, b)?;
        let n = tape.add(a, rb)?;
        let n = tape.tanh(n);
        let zn = tape.mul(z, n)?;
        let keep = tape.sub(n, zn)?;
        let zh = tape.mul(z, h_prev)?;
        tape.add(keep, zh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn positional_table() {
        let pe = positional_encoding(8, 4).unwrap();
        for i in 0..2 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        for t in 0..8 {
            assert_eq!(pe.data()[t * 4], (t as f64).sin());
            for i in 0..2 {
                let a = t as f64 / 10000f64.powf(2.0 * i as f64 / 4.0);
                assert!((pe.data()[t * 4 + 2 * i] - a.sin()).abs() < 1e-15);
                assert!((pe.data()[t * 4 + 2 * i + 1] - a.cos()).abs() < 1e-15);
            }
        }
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn attention_single_position_ignores_query_key() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 4], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let bound = mha.bind(&mut tape, &store);
        let y = bound.forward(&mut tape, x).unwrap();
        let v = mha.value.bind(&mut tape, &store).forward(&mut tape, x).unwrap();
        let want = mha.output.bind(&mut tape, &store).forward(&mut tape, v).unwrap();
        assert_eq!(tape.value(y), tape.value(want));
        assert!(MultiHeadAttention::new(&mut store, "b", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 6, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 5, 6], (0..60).map(|i| (i as f64).sin()).collect()).unwrap());
        let (_, weights) = mha.bind(&mut tape, &store).forward_with_weights(&mut tape, x).unwrap();
        for w in weights {
            for row in tape.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_constant_rows_normalize_to_zero() {
        let mut rng = seeded(3);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "tf", 4, 2, &mut rng).unwrap();
        let outer_b = block.ffn.outer.b.unwrap();
        for id in [block.ffn.outer.w, block.ffn.inner.w] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        store.value_mut(outer_b).data_mut().fill(0.7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 4], (0..12).map(|i| i as f64).collect()).unwrap());
        let y = block.bind(&mut tape, &store).forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 4]);
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn conv_identity_and_collapse() {
        let mut rng = seeded(4);
        let mut store = ParamStore::new();
        let c = Conv1d::new(&mut store, "c", 1, 3, 3, &mut rng);
        zero_all(&mut store);
        for i in 0..3 {
            store.value_mut(c.kernel).data_mut()[i * 3 + i] = 1.0;
        }
        let x0 = Tensor::new(vec![2, 4, 3], (0..24).map(|i| i as f64 - 5.0).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = c.bind(&mut tape, &store).forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &x0);

        let full = Conv1d::new(&mut store, "full", 4, 3, 2, &mut rng);
        let y = full.bind(&mut tape, &store).forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 2]);
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut rng = seeded(5);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "g", 2, 3, &mut rng);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let bound = gru.bind(&mut tape, &store);
        let h = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 4.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap());
        let h1 = bound.step(&mut tape, h, x).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.5, -1.0, 2.0]);
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let h1 = bound.step(&mut tape, h0, x).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.0; 3]);
    }
}
