use serde::{Deserialize, Serialize};

use crate::csai::{CsaiGraph, ModelOutput};
use crate::error::{invalid, shape, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Weights of the secondary loss terms; reconstruction always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub consistency: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency: 0.1,
            classification: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.consistency >= 0.0 && self.classification >= 0.0) {
            return Err(invalid(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Values the reconstruction term is scored against, `[N x T x D]`. Only
/// cells with `mask = 1` count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

impl ReconTarget {
    fn n_cells(&self) -> Result<f64> {
        let n: f64 = self.mask.iter().sum();
        if n == 0.0 {
            return Err(invalid("no observed cells to reconstruct"));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub consistency: f64,
    pub classification: Option<f64>,
    pub total: f64,
}

/// `sum over directions of mean over estimates of masked mean |est - x|`.
pub fn reconstruction_loss(directions: &[[&[f64]; 3]], target: &ReconTarget) -> Result<f64> {
    let n = target.n_cells()?;
    let mut total = 0.0;
    for ests in directions {
        let mut dir = 0.0;
        for est in ests {
            if est.len() != target.values.len() {
                return Err(shape(format!("{} estimates for {} cells", est.len(), target.values.len())));
            }
            let s: f64 = est
                .iter()
                .zip(&target.values)
                .zip(&target.mask)
                .map(|((e, x), m)| (e - x).abs() * m)
                .sum();
            dir += s / n;
        }
        total += dir / 3.0;
    }
    Ok(total)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Mean binary cross-entropy from logits.
pub fn bce_with_logits(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| softplus(l) - f64::from(y) * l)
        .sum::<f64>()
        / logits.len() as f64)
}

/// Total loss of a plain forward pass.
pub fn compute_loss(
    output: &ModelOutput,
    target: &ReconTarget,
    labels: Option<&[u8]>,
    weights: &LossWeights,
) -> Result<LossComponents> {
    let dirs: Vec<[&[f64]; 3]> = output
        .estimates
        .iter()
        .map(|e| [e[0].as_slice(), e[1].as_slice(), e[2].as_slice()])
        .collect();
    let reconstruction = reconstruction_loss(&dirs, target)?;
    let classification = labels.map(|y| bce_with_logits(&output.logits, y)).transpose()?;
    let total = reconstruction
        + weights.consistency * output.consistency
        + weights.classification * classification.unwrap_or(0.0);
    Ok(LossComponents {
        reconstruction,
        consistency: output.consistency,
        classification,
        total,
    })
}

/// The same loss built on the tape for backpropagation.
pub fn loss_graph(
    tape: &mut Tape,
    graph: &CsaiGraph,
    target: &ReconTarget,
    labels: Option<&[u8]>,
    weights: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let n = target.n_cells()?;
    let cells_shape = tape.value(graph.trace.imputation).shape().to_vec();
    if target.values.len() != tape.value(graph.trace.imputation).len() || target.mask.len() != target.values.len() {
        return Err(shape(format!("target of {} cells for output {cells_shape:?}", target.values.len())));
    }
    let x = tape.constant(Tensor::new(cells_shape.clone(), target.values.clone())?);
    let w = tape.constant(Tensor::new(cells_shape, target.mask.clone())?);
    let mut terms = Vec::with_capacity(6);
    for est in graph.trace.fwd_estimates.iter().chain(&graph.trace.bwd_estimates) {
        let diff = tape.sub(*est, x)?;
        let diff = tape.abs(diff);
        let diff = tape.mul(diff, w)?;
        terms.push(tape.sum(diff));
    }
    let mut recon = terms[0];
    for &t in &terms[1..] {
        recon = tape.add(recon, t)?;
    }
    let recon = tape.scale(recon, 1.0 / (3.0 * n));
    let cons = tape.scale(graph.trace.consistency, weights.consistency);
    let mut total = tape.add(recon, cons)?;
    let mut classification = None;
    if let Some(y) = labels {
        let logits = tape.value(graph.logits);
        if logits.len() != y.len() {
            return Err(shape(format!("{} logits for {} labels", logits.len(), y.len())));
        }
        let ys = tape.constant(Tensor::new(logits.shape().to_vec(), y.iter().map(|&v| f64::from(v)).collect())?);
        let sp = tape.softplus(graph.logits);
        let yl = tape.mul(ys, graph.logits)?;
        let bce = tape.sub(sp, yl)?;
        let bce = tape.sum(bce);
        let bce = tape.scale(bce, 1.0 / y.len() as f64);
        classification = Some(tape.value(bce).item());
        let weighted = tape.scale(bce, weights.classification);
        total = tape.add(total, weighted)?;
    }
    let parts = LossComponents {
        reconstruction: tape.value(recon).item(),
        consistency: tape.value(graph.trace.consistency).item(),
        classification,
        total: tape.value(total).item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csai::{extract_output, CsaiConfig, CsaiModel};
    use crate::tsdata::{compute_median_gaps, generate_synthetic, SyntheticConfig};

    #[test]
    fn single_cell_example() {
        let est = [1.5];
        let t = ReconTarget { values: vec![1.0], mask: vec![1.0] };
        let l = reconstruction_loss(&[[&est, &est, &est]], &t).unwrap();
        assert_eq!(l, 0.5);
        let none = ReconTarget { values: vec![1.0], mask: vec![0.0] };
        assert!(reconstruction_loss(&[[&est, &est, &est]], &none).is_err());
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = [0.3, -1.0, 2.0];
        let t = ReconTarget { values: x.to_vec(), mask: vec![1.0, 0.0, 1.0] };
        assert_eq!(reconstruction_loss(&[[&x, &x, &x], [&x, &x, &x]], &t).unwrap(), 0.0);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let l = [0.3, -2.0, 5.0];
        let y = [1, 0, 1];
        let direct: f64 = l
            .iter()
            .zip(&y)
            .map(|(&l, &y)| {
                let p = 1.0 / (1.0 + (-l as f64).exp());
                if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
            })
            .sum::<f64>()
            / 3.0;
        assert!((bce_with_logits(&l, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let ds = generate_synthetic(&SyntheticConfig::desk_scale(4, 6, 3), 2).unwrap();
        let tau = compute_median_gaps(&ds.batch).unwrap();
        let cfg = CsaiConfig { d_model: 4, n_heads: 2, d_hidden: 5, ..Default::default() };
        let (m, s) = CsaiModel::init(cfg, 6, 3, Some(&tau), 3).unwrap();
        let target = ReconTarget {
            values: ds.batch.values().to_vec(),
            mask: ds.batch.mask().to_vec(),
        };
        let w = LossWeights { consistency: 0.3, classification: 0.7 };
        let mut tape = Tape::new();
        let g = m.graph(&mut tape, &s, &ds.batch).unwrap();
        let (_, parts) = loss_graph(&mut tape, &g, &target, ds.batch.labels(), &w).unwrap();
        let plain = compute_loss(&extract_output(&tape, &g), &target, ds.batch.labels(), &w).unwrap();
        assert!((parts.total - plain.total).abs() < 1e-12);
        assert!((parts.reconstruction - plain.reconstruction).abs() < 1e-12);
        assert_eq!(parts.classification.is_some(), plain.classification.is_some());
    }
}
