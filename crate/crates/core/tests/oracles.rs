//! Tape-built layers and model pieces against straight-line scalar code.

use rand::Rng;

use csai_core::brits::{brits_cell_step, run_bidirectional, BritsCellParams, RecurrentInput};
use csai_core::csai::{CsaiConfig, CsaiModel};
use csai_core::numcore::layers::{Conv1d, GruCell, MultiHeadAttention, TransformerBlock};
use csai_core::numcore::{positional_encoding, ParamStore, Tape, Tensor};
use csai_core::rng::seeded;
use csai_core::tsdata::{compute_median_gaps, Dims, TimeSeriesBatch};

type Rows = Vec<Vec<f64>>;

const TOL: f64 = 1e-12;

/// Overwrite every parameter with uniform noise so gains and shifts matter.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = seeded(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.value(store.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn linear(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b")).data();
    let out = w.shape()[1];
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w.data()[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let g = param(store, &format!("{name}.gamma")).data();
    let b = param(store, &format!("{name}.beta")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn mha(store: &ParamStore, name: &str, x: &Rows, heads: usize) -> Rows {
    let q = linear(store, &format!("{name}.q"), x);
    let k = linear(store, &format!("{name}.k"), x);
    let v = linear(store, &format!("{name}.v"), x);
    let (l, dm) = (x.len(), x[0].len());
    let dk = dm / heads;
    let mut cat = vec![vec![0.0; dm]; l];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(store, &format!("{name}.o"), &cat)
}

fn transformer(store: &ParamStore, name: &str, x: &Rows, heads: usize) -> Rows {
    let a = layer_norm(store, &format!("{name}.ln1"), &mha(store, &format!("{name}.msa"), x, heads));
    let f: Rows = linear(store, &format!("{name}.ffn.1"), &a)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let f = linear(store, &format!("{name}.ffn.2"), &f);
    layer_norm(store, &format!("{name}.ln2"), &f)
}

fn conv(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let k = param(store, &format!("{name}.kernel"));
    let b = param(store, &format!("{name}.bias")).data();
    let (kw, cin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    (0..=x.len() - kw)
        .map(|o| {
            (0..cout)
                .map(|c| {
                    let mut s = b[c];
                    for j in 0..kw {
                        for ci in 0..cin {
                            s += x[o + j][ci] * k.data()[(j * cin + ci) * cout + c];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gru(store: &ParamStore, name: &str, h: &[f64], x: &[f64]) -> Vec<f64> {
    let l = |part: &str, v: &[f64]| linear(store, &format!("{name}.{part}"), &vec![v.to_vec()]).remove(0);
    let (ir, iz, inn) = (l("ir", x), l("iz", x), l("in", x));
    let (hr, hz, hn) = (l("hr", h), l("hz", h), l("hn", h));
    (0..h.len())
        .map(|j| {
            let r = sig(ir[j] + hr[j]);
            let z = sig(iz[j] + hz[j]);
            let n = (inn[j] + r * hn[j]).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

fn rows_of(t: &Tensor, sample: usize) -> Rows {
    let s = t.shape();
    let (l, w) = (s[s.len() - 2], s[s.len() - 1]);
    (0..l).map(|i| t.data()[(sample * l + i) * w..(sample * l + i + 1) * w].to_vec()).collect()
}

fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn attention_matches_scalar_code() {
    let mut store = ParamStore::new();
    let layer = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut seeded(1)).unwrap();
    jitter(&mut store, 11);
    let x = input(&[2, 3, 4], 12);
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape, &store);
    let xv = tape.constant(x.clone());
    let y = bound.forward(&mut tape, xv).unwrap();
    for n in 0..2 {
        let want = mha(&store, "a", &rows_of(&x, n), 2);
        assert!(max_diff(&rows_of(tape.value(y), n), &want) < TOL);
    }
}

#[test]
fn transformer_matches_scalar_code() {
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "t", 4, 2, &mut seeded(2)).unwrap();
    jitter(&mut store, 21);
    let x = input(&[1, 2, 4], 22);
    let mut tape = Tape::new();
    let bound = block.bind(&mut tape, &store);
    let xv = tape.constant(x.clone());
    let y = bound.forward(&mut tape, xv).unwrap();
    let want = transformer(&store, "t", &rows_of(&x, 0), 2);
    assert!(max_diff(&rows_of(tape.value(y), 0), &want) < TOL);
}

#[test]
fn conv_matches_scalar_code() {
    let mut store = ParamStore::new();
    let layer = Conv1d::new(&mut store, "c", 2, 2, 3, &mut seeded(3));
    let x = input(&[1, 5, 2], 31);
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape, &store);
    let xv = tape.constant(x.clone());
    let y = bound.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y).shape(), [1, 4, 3]);
    assert!(max_diff(&rows_of(tape.value(y), 0), &conv(&store, "c", &rows_of(&x, 0))) < TOL);
}

#[test]
fn gru_matches_scalar_code() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "g", 2, 3, &mut seeded(4));
    let h = input(&[1, 3], 41);
    let x = input(&[1, 2], 42);
    let mut tape = Tape::new();
    let bound = cell.bind(&mut tape, &store);
    let (hv, xv) = (tape.constant(h.clone()), tape.constant(x.clone()));
    let y = bound.step(&mut tape, hv, xv).unwrap();
    let want = gru(&store, "g", h.data(), x.data());
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < TOL);
    }
}

fn small_batch(dims: Dims, seed: u64) -> TimeSeriesBatch {
    let mut rng = seeded(seed);
    let values = (0..dims.cells()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut mask: Vec<f64> = (0..dims.cells()).map(|_| f64::from(rng.random::<f64>() < 0.6)).collect();
    mask[0] = 1.0;
    let mut ts = Vec::new();
    for _ in 0..dims.n {
        let mut s = 0.0;
        for k in 0..dims.t {
            if k > 0 {
                s += rng.random_range(0.5..3.0);
            }
            ts.push(s);
        }
    }
    TimeSeriesBatch::new(dims, values, mask, ts, None, vec![0.0; dims.d]).unwrap()
}

#[test]
fn backward_gaps_count_time_to_next_observation() {
    let b = small_batch(Dims::new(2, 6, 3), 5);
    let r = b.reversed();
    let dims = b.dims();
    for n in 0..2 {
        let s = &b.timestamps()[n * 6..n * 6 + 6];
        for f in 0..3 {
            // gap at forward step t looking backwards in time: to step t+1,
            // extended through unobserved later steps
            let mut want = [0.0; 6];
            for t in (0..5).rev() {
                let gap = s[t + 1] - s[t];
                want[t] = if b.mask()[dims.idx(n, t + 1, f)] == 0.0 { gap + want[t + 1] } else { gap };
            }
            for t in 0..6 {
                let got = r.delta()[dims.idx(n, 5 - t, f)];
                assert!((got - want[t]).abs() < 1e-12, "n {n} f {f} t {t}: {got} vs {}", want[t]);
            }
        }
    }
}

#[test]
fn backward_direction_walks_reversed_time() {
    let b = small_batch(Dims::new(2, 5, 3), 6);
    let mut store = ParamStore::new();
    let fwd = BritsCellParams::new(&mut store, "f", 3, 4, RecurrentInput::Product, &mut seeded(60));
    let bwd = BritsCellParams::new(&mut store, "b", 3, 4, RecurrentInput::Product, &mut seeded(61));
    let mut tape = Tape::new();
    let (fc, bc) = (fwd.bind(&mut tape, &store).unwrap(), bwd.bind(&mut tape, &store).unwrap());
    let z = tape.constant(Tensor::zeros(&[2, 4]));
    let trace = run_bidirectional(&mut tape, &fc, &bc, &b, &b.reversed(), z, z).unwrap();

    let r = b.reversed();
    let dims = b.dims();
    let slice = |src: &[f64], k: usize| {
        let mut v = Vec::new();
        for n in 0..2 {
            v.extend_from_slice(&src[dims.idx(n, k, 0)..dims.idx(n, k, 0) + 3]);
        }
        Tensor::new(vec![2, 3], v).unwrap()
    };
    let mut h = Tensor::zeros(&[2, 4]);
    for k in 0..5 {
        let out = brits_cell_step(&store, &bwd, &h, &slice(r.values(), k), &slice(r.mask(), k), &slice(r.delta(), k)).unwrap();
        let forward_time = 4 - k;
        assert_eq!(tape.value(trace.bwd.steps[forward_time].x_c), &out.x_c);
        h = out.h;
    }
    assert_eq!(tape.value(trace.bwd.h_final), &h);
    let stacked = tape.value(trace.bwd_estimates[2]).data();
    for t in 0..5 {
        let step = tape.value(trace.bwd.steps[t].x_c).data();
        for n in 0..2 {
            assert_eq!(&stacked[dims.idx(n, t, 0)..dims.idx(n, t, 0) + 3], &step[n * 3..n * 3 + 3]);
        }
    }
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Conditional initial state of one sample, written out layer by layer.
fn init_oracle(store: &ParamStore, model: &CsaiModel, b: &TimeSeriesBatch, attn: &str) -> Vec<f64> {
    let dims = b.dims();
    let tau = model.tau().unwrap();
    let raw = param(store, &format!("{attn}.rate")).data();
    let pe = positional_encoding(dims.t, model.config.d_model).unwrap();
    let pe = rows_of(&pe.reshape(vec![1, dims.t, model.config.d_model]).unwrap(), 0);
    let lo: Rows = (0..dims.t).map(|t| b.last_obs()[t * dims.d..(t + 1) * dims.d].to_vec()).collect();
    let att: Rows = (0..dims.t)
        .map(|t| {
            (0..dims.d)
                .map(|f| {
                    let u = b.delta()[t * dims.d + f] - tau[f];
                    (-softplus(raw[f]) * (u * u + model.config.decay_eps).sqrt()).exp()
                })
                .collect()
        })
        .collect();
    let add_pe = |r: Rows| -> Rows {
        r.into_iter().zip(&pe).map(|(a, p)| a.iter().zip(p).map(|(x, y)| x + y).collect()).collect()
    };
    let mut c_in = add_pe(linear(store, "init.proj", &lo));
    c_in.extend(add_pe(linear(store, "init.proj", &att)));
    let c_out = transformer(store, "init.encoder", &c_in, model.config.n_heads);
    let h1 = conv(store, "init.conv1", &c_out);
    let h = conv(store, "init.conv2", &h1);
    assert_eq!(h.len(), 1);
    h.into_iter().next().unwrap()
}

#[test]
fn csai_composition_matches_scalar_code() {
    let b = small_batch(Dims::new(1, 2, 2), 9);
    let tau = compute_median_gaps(&b).unwrap();
    let config = CsaiConfig { d_model: 4, n_heads: 2, d_hidden: 3, ..Default::default() };
    let (model, mut store) = CsaiModel::init(config, 2, 2, Some(&tau), 9).unwrap();
    jitter(&mut store, 90);
    model.project(&mut store);

    let (hf, hb) = model.hidden_init_values(&store, &b).unwrap();
    let want_f = init_oracle(&store, &model, &b, "fwd.attn");
    let want_b = init_oracle(&store, &model, &b.reversed(), "bwd.attn");
    for (a, w) in hf.data().iter().zip(&want_f).chain(hb.data().iter().zip(&want_b)) {
        assert!((a - w).abs() < TOL, "{a} vs {w}");
    }

    // the recurrent part started from those states
    let out = model.forward(&store, &b).unwrap();
    let mut tape = Tape::new();
    let (fc, bc) = (model.fwd.bind(&mut tape, &store).unwrap(), model.bwd.bind(&mut tape, &store).unwrap());
    let h0f = tape.constant(Tensor::new(vec![1, 3], want_f).unwrap());
    let h0b = tape.constant(Tensor::new(vec![1, 3], want_b).unwrap());
    let trace = run_bidirectional(&mut tape, &fc, &bc, &b, &b.reversed(), h0f, h0b).unwrap();
    for (a, w) in out.imputation.iter().zip(tape.value(trace.imputation).data()) {
        assert!((a - w).abs() < TOL);
    }
    let finals: Vec<f64> = tape.value(trace.fwd.h_final).data().iter().chain(tape.value(trace.bwd.h_final).data()).copied().collect();
    let logit = linear(&store, "classifier", &vec![finals])[0][0];
    assert!((out.logits[0] - logit).abs() < TOL);
    assert!((out.scores[0] - sig(logit)).abs() < TOL);
}
