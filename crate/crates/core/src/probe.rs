//! Per-head logistic probes that tell true completions from edited ones,
//! the layer x head accuracy map and top-K head selection.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{encode_prompt, FactRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{forward_graph, score_continuations, Batch, BoundParams, Interventions, ModelRef};

/// Fraction of records held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.4;
/// Fewest records a refined dataset may keep.
pub const MIN_RECORDS: usize = 10;

const CHUNK: usize = 64;

/// Head activations at the last token of `prompt + object` for every
/// (layer, head), two examples per record (true object: 0, new object: 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub n_layers: usize,
    pub n_heads: usize,
    /// One `N x dh` matrix per head, index `layer * n_heads + head`; rows
    /// are examples in the same order everywhere.
    pub activations: Vec<Array2<f64>>,
    pub labels: Vec<u8>,
    /// Source record of each example.
    pub record_ids: Vec<u64>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn head(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.activations[layer * self.n_heads + head]
    }

    /// Distinct records in example order.
    pub fn records(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &id in &self.record_ids {
            if out.last() != Some(&id) {
                out.push(id);
            }
        }
        out
    }

    /// Mean activation of the label-1 examples at one head.
    pub fn truthful_mean(&self, layer: usize, head: usize) -> Result<Array1<f64>> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 1).collect();
        if rows.is_empty() {
            return Err(Error::Input("probe dataset has no label-1 examples".into()));
        }
        Ok(self
            .head(layer, head)
            .select(Axis(0), &rows)
            .mean_axis(Axis(0))
            .expect("non-empty"))
    }

    /// Copy with the labels randomly permuted (still balanced).
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        out
    }
}

/// Splits records 60/40; both examples of a record land on the same side.
fn split(n_records: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n_records as f64) * VALIDATION_FRACTION).round() as usize;
    let expand = |rs: &[usize]| {
        let mut v: Vec<usize> = rs.iter().flat_map(|&r| [2 * r, 2 * r + 1]).collect();
        v.sort_unstable();
        v
    };
    (expand(&order[n_val..]), expand(&order[..n_val]))
}

/// Builds the probe dataset from `records` on `model` (the edited model).
/// With `refine`, only records whose greedy completion of the efficacy
/// prompt is already the new object are kept.
pub fn collect_probe_data(
    model: ModelRef<'_>,
    records: &[FactRecord],
    tok: &Tokenizer,
    refine: bool,
    seed: u64,
) -> Result<ProbeDataset> {
    let params = model.params;
    let config = &params.config;
    let mut kept = Vec::new();
    for r in records {
        let prompt = encode_prompt(tok, &r.efficacy_prompt)?;
        let new = tok.encode(&r.target_new)?;
        let true_ = tok.encode(&r.target_true)?;
        if refine && !score_continuations(model, &[(&prompt, &new)])?[0].greedy_match {
            continue;
        }
        kept.push((r.id, prompt, true_, new));
    }
    if kept.len() < MIN_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} records left for probing, need at least {MIN_RECORDS}",
            kept.len()
        )));
    }
    let mut seqs = Vec::with_capacity(2 * kept.len());
    let mut labels = Vec::with_capacity(2 * kept.len());
    let mut record_ids = Vec::with_capacity(2 * kept.len());
    for (id, prompt, true_, new) in &kept {
        for (label, obj) in [(0u8, true_), (1u8, new)] {
            let mut s = prompt.clone();
            s.extend(obj);
            seqs.push(s);
            labels.push(label);
            record_ids.push(*id);
        }
    }
    let dh = config.head_dim();
    let n = seqs.len();
    let mut activations = vec![Array2::<f64>::zeros((n, dh)); config.n_layers * config.n_heads];
    for (ci, chunk) in seqs.chunks(CHUNK).enumerate() {
        let batch = Batch::new(chunk, config)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(params, &mut g, false);
        let hooks = model.patch.map(|p| Interventions::from_patch(&mut g, p)).unwrap_or_default();
        let fw = forward_graph(&mut g, config, &bound, &batch, &hooks);
        for (l, tap) in fw.layers.iter().enumerate() {
            let heads = g.value(tap.heads);
            for (j, seg) in batch.segments.iter().enumerate() {
                let row = heads.row(seg.end - 1);
                for h in 0..config.n_heads {
                    activations[l * config.n_heads + h]
                        .row_mut(ci * CHUNK + j)
                        .assign(&row.slice(ndarray::s![h * dh..(h + 1) * dh]));
                }
            }
        }
    }
    let (train, validation) = split(kept.len(), seed);
    Ok(ProbeDataset {
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        activations,
        labels,
        record_ids,
        train,
        validation,
    })
}

/// Logistic classifier over standardized head activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadClassifier {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl HeadClassifier {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| (x - m) / s * w)
                .sum::<f64>()
    }

    /// Step of the logit at 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.logit(x) > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTraining {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

fn fit(x: &Array2<f64>, y: &Array1<f64>, cfg: &ProbeTraining) -> (Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let p = (x.dot(&w) + b).mapv(|z| 1.0 / (1.0 + (-z).exp()));
        let err = p - y;
        let gw = x.t().dot(&err) / n + &w * cfg.l2;
        let gb = err.sum() / n;
        w.scaled_add(-cfg.lr, &gw);
        b -= cfg.lr * gb;
    }
    (w, b)
}

fn train_head(data: &ProbeDataset, layer: usize, head: usize, cfg: &ProbeTraining) -> (HeadClassifier, f64) {
    let acts = data.head(layer, head);
    let x = acts.select(Axis(0), &data.train);
    let mean = x.mean_axis(Axis(0)).expect("non-empty train split");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xs = (&x - &mean) / &scale;
    let y: Array1<f64> = data.train.iter().map(|&i| f64::from(data.labels[i])).collect();
    let (w, b) = fit(&xs, &y, cfg);
    let clf = HeadClassifier {
        layer,
        head,
        weights: w.to_vec(),
        bias: b,
        mean: mean.to_vec(),
        scale: scale.to_vec(),
    };
    let correct = data
        .validation
        .iter()
        .filter(|&&i| clf.predict(acts.row(i).as_slice().expect("contiguous row")) == data.labels[i])
        .count();
    let acc = if data.validation.is_empty() {
        0.0
    } else {
        correct as f64 / data.validation.len() as f64
    };
    (clf, acc)
}

/// Validation accuracy of every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMap {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Row-major `n_layers x n_heads`.
    pub values: Vec<f64>,
}

impl AccuracyMap {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// One row per layer, one column per head.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for h in 0..self.n_heads {
            out.push_str(&format!(",h{h}"));
        }
        out.push('\n');
        for l in 0..self.n_layers {
            out.push_str(&l.to_string());
            for h in 0..self.n_heads {
                out.push_str(&format!(",{:.4}", self.get(l, h)));
            }
            out.push('\n');
        }
        out
    }
}

/// Fits one classifier per head on the train split and scores it on the
/// validation split.
pub fn train_probes(data: &ProbeDataset, cfg: &ProbeTraining) -> Result<(Vec<HeadClassifier>, AccuracyMap)> {
    if data.train.is_empty() {
        return Err(Error::Training("empty probe train split".into()));
    }
    let ones = data.train.iter().filter(|&&i| data.labels[i] == 1).count();
    if ones == 0 || ones == data.train.len() {
        return Err(Error::Training("probe train split has a single class".into()));
    }
    let (classifiers, values): (Vec<_>, Vec<_>) = (0..data.n_layers * data.n_heads)
        .into_par_iter()
        .map(|i| train_head(data, i / data.n_heads, i % data.n_heads, cfg))
        .unzip();
    Ok((
        classifiers,
        AccuracyMap {
            n_layers: data.n_layers,
            n_heads: data.n_heads,
            values,
        },
    ))
}

/// The `k` most accurate heads; ties go to the lower layer, then head.
pub fn select_top_k(map: &AccuracyMap, k: usize) -> Result<Vec<(usize, usize)>> {
    let total = map.n_layers * map.n_heads;
    if k == 0 || k > total {
        return Err(Error::Input(format!("K must be in 1..={total}, got {k}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| (i / map.n_heads, i % map.n_heads)).collect())
}

/// Accuracy a head reaches by chance with probability ~0.1% on `n`
/// validation examples: `0.5 + 3 sqrt(0.25 / n)`.
pub fn chance_bound(n: usize) -> f64 {
    0.5 + 3.0 * (0.25 / n as f64).sqrt()
}

/// Probe results as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: AccuracyMap,
    pub psi: Vec<(usize, usize)>,
    pub classifiers: Vec<HeadClassifier>,
    pub n_records: usize,
    pub refined: bool,
}
