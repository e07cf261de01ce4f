//! Residual targets: the hidden-state shift at the subject that makes the
//! model emit the new object.

use ndarray::Array2;

use super::context::{EditRequest, Prefixes};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{forward_graph, Batch, BoundParams, Interventions, ModelParams};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetResult {
    /// `u x d` residuals added to the block output of the top layer at the
    /// subject's last token.
    pub deltas: Array2<f64>,
    /// Final context-averaged NLL of the new object per request (NaN when no
    /// step ran).
    pub nll: Vec<f64>,
    /// Whether the request stopped early below the NLL gate.
    pub gated: Vec<bool>,
    /// Optimizer updates applied per request.
    pub updates: Vec<usize>,
}

/// Sequences `context + target[..T-1]` for every (request, context) and the
/// rows/targets scored for each request.
struct TargetBatch {
    seqs: Vec<Vec<usize>>,
    subject_rows: Vec<(usize, usize)>,
    picks: Vec<Vec<(usize, usize)>>,
}

fn build(requests: &[&EditRequest], prefixes: &Prefixes) -> TargetBatch {
    let mut seqs = Vec::new();
    let mut subject_rows = Vec::new();
    let mut picks = vec![Vec::new(); requests.len()];
    let mut start = 0;
    for (i, req) in requests.iter().enumerate() {
        for c in 0..prefixes.len() {
            let (mut seq, row) = prefixes.context(c, req);
            let prompt_end = seq.len();
            seq.extend(&req.target[..req.target.len() - 1]);
            subject_rows.push((i, start + row));
            for (t, &tok) in req.target.iter().enumerate() {
                picks[i].push((start + prompt_end - 1 + t, tok));
            }
            start += seq.len();
            seqs.push(seq);
        }
    }
    TargetBatch {
        seqs,
        subject_rows,
        picks,
    }
}

/// Context-averaged NLL of each request's target with `deltas` added at the
/// subject of `layer`, as graph nodes over the trainable `vars`.
fn nll_nodes<'a>(
    g: &mut Graph<'a>,
    params: &'a ModelParams,
    requests: &[&EditRequest],
    vars: &[Var],
    prefixes: &Prefixes,
    layer: usize,
) -> Result<Vec<Var>> {
    let tb = build(requests, prefixes);
    let batch = Batch::new(&tb.seqs, &params.config)?;
    let bound = BoundParams::bind(params, g, false);
    let hooks = Interventions {
        residual_offsets: tb.subject_rows.iter().map(|&(i, row)| (layer, row, vars[i])).collect(),
        ..Interventions::default()
    };
    let fw = forward_graph(g, &params.config, &bound, &batch, &hooks);
    let scale = -1.0 / prefixes.len() as f64;
    Ok(tb
        .picks
        .iter()
        .map(|p| {
            let s = g.pick_sum(fw.log_probs, p);
            g.scale(s, scale)
        })
        .collect())
}

/// Context-averaged NLL of each request's target under fixed residuals.
pub fn target_nll(
    params: &ModelParams,
    requests: &[EditRequest],
    deltas: &Array2<f64>,
    prefixes: &Prefixes,
    layer: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(requests.len());
    for (ci, chunk) in requests.chunks(16).enumerate() {
        let mut g = Graph::new();
        let refs: Vec<&EditRequest> = chunk.iter().collect();
        let vars: Vec<Var> = (0..chunk.len())
            .map(|i| g.constant(deltas.row(ci * 16 + i).to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let nodes = nll_nodes(&mut g, params, &refs, &vars, prefixes, layer)?;
        out.extend(nodes.iter().map(|&v| g.scalar(v)));
    }
    Ok(out)
}

/// Gradient of the summed per-request NLL with respect to every residual.
pub fn target_gradient(
    params: &ModelParams,
    requests: &[EditRequest],
    deltas: &Array2<f64>,
    prefixes: &Prefixes,
    layer: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(deltas.dim());
    if requests.is_empty() {
        return Ok(out);
    }
    let mut g = Graph::new();
    let refs: Vec<&EditRequest> = requests.iter().collect();
    let vars: Vec<Var> = (0..requests.len())
        .map(|i| g.leaf(deltas.row(i).to_owned().insert_axis(ndarray::Axis(0))))
        .collect();
    let nodes = nll_nodes(&mut g, params, &refs, &vars, prefixes, layer)?;
    let mut total = nodes[0];
    for &n in &nodes[1..] {
        total = g.add(total, n);
    }
    let mut grads = g.backward(total)?;
    for (i, &v) in vars.iter().enumerate() {
        if let Some(gv) = grads.take(v) {
            out.row_mut(i).assign(&gv.row(0));
        }
    }
    Ok(out)
}

/// Optimizes one residual per request with Adam, stopping a request early
/// once its NLL falls below `gate`.
pub fn optimize_targets(
    params: &ModelParams,
    requests: &[EditRequest],
    prefixes: &Prefixes,
    layer: usize,
    steps: usize,
    lr: f64,
    gate: f64,
) -> Result<TargetResult> {
    let d = params.config.d_model;
    let u = requests.len();
    if layer >= params.config.n_layers {
        return Err(Error::Input(format!("layer {layer} outside the model")));
    }
    let mut result = TargetResult {
        deltas: Array2::zeros((u, d)),
        nll: vec![f64::NAN; u],
        gated: vec![false; u],
        updates: vec![0; u],
    };
    if steps == 0 || u == 0 {
        return Ok(result);
    }
    let mut adams: Vec<Adam> = (0..u)
        .map(|_| Adam::new(AdamConfig { lr, ..AdamConfig::default() }, [(1, d)]))
        .collect();
    for step in 0..=steps {
        let active: Vec<usize> = (0..u).filter(|&i| !result.gated[i]).collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(16) {
            let mut g = Graph::new();
            let refs: Vec<&EditRequest> = chunk.iter().map(|&i| &requests[i]).collect();
            let vars: Vec<Var> = chunk
                .iter()
                .map(|&i| g.leaf(result.deltas.row(i).to_owned().insert_axis(ndarray::Axis(0))))
                .collect();
            let nodes = nll_nodes(&mut g, params, &refs, &vars, prefixes, layer)?;
            let mut total = nodes[0];
            for &n in &nodes[1..] {
                total = g.add(total, n);
            }
            let values: Vec<f64> = nodes.iter().map(|&n| g.scalar(n)).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Optimization(format!("non-finite target loss at step {step}")));
            }
            let mut grads = g.backward(total)?;
            for (j, &i) in chunk.iter().enumerate() {
                result.nll[i] = values[j];
                if values[j] < gate {
                    result.gated[i] = true;
                    continue;
                }
                if step == steps {
                    continue;
                }
                let grad = grads.take(vars[j]).unwrap_or_else(|| Array2::zeros((1, d)));
                let mut row = result.deltas.row(i).to_owned().insert_axis(ndarray::Axis(0));
                adams[i].step([&mut row], &[grad]);
                result.deltas.row_mut(i).assign(&row.row(0));
                result.updates[i] += 1;
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 32,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn requests() -> Vec<EditRequest> {
        (0..3)
            .map(|i| EditRequest {
                record_id: i,
                prompt: vec![5 + i as usize, 6, 7],
                subject_last: 0,
                target: vec![10 + i as usize, 11],
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_zero_ungated_residuals() {
        let r = optimize_targets(&model(), &requests(), &Prefixes(vec![vec![1]]), 1, 0, 0.2, 0.05).unwrap();
        assert!(r.deltas.iter().all(|&x| x == 0.0));
        assert!(r.gated.iter().all(|g| !g));
    }

    #[test]
    fn trivially_satisfied_gate_accepts_zero_residual() {
        let r = optimize_targets(&model(), &requests(), &Prefixes(vec![vec![1]]), 1, 5, 0.2, 1e9).unwrap();
        assert!(r.deltas.iter().all(|&x| x == 0.0));
        assert!(r.gated.iter().all(|&g| g));
        assert!(r.updates.iter().all(|&n| n == 0));
    }

    #[test]
    fn optimization_raises_target_probability() {
        let p = model();
        let prefixes = Prefixes(vec![vec![1], vec![1, 3, 2]]);
        let reqs = requests();
        let r = optimize_targets(&p, &reqs, &prefixes, 0, 25, 0.2, 0.05).unwrap();
        let before = target_nll(&p, &reqs, &Array2::zeros(r.deltas.dim()), &prefixes, 0).unwrap();
        let after = target_nll(&p, &reqs, &r.deltas, &prefixes, 0).unwrap();
        for i in 0..reqs.len() {
            assert!(after[i] < before[i]);
            assert!((after[i] - r.nll[i]).abs() < 1e-9 || r.gated[i]);
        }
    }
}
