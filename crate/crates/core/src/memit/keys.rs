//! Subject keys, block outputs at the subject, and the preexisting-key
//! covariance.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use log::warn;

use super::context::{find_last_token, EditRequest, Prefixes};
use crate::autodiff::Graph;
use crate::dataset::{FactRecord, PretrainConfig, PretrainData, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{forward_graph, Batch, BoundParams, Interventions, ModelParams};

/// Sequences per packed forward pass.
const CHUNK: usize = 64;

/// Context-averaged activations at the subject's last token for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectActivations {
    pub layer: usize,
    /// `u x d_ff` MLP keys.
    pub keys: Array2<f64>,
    /// `u x d` block outputs.
    pub outputs: Array2<f64>,
}

/// Averages keys and block outputs over every prefix context for each
/// request, at each of `layers`.
pub fn subject_activations(
    params: &ModelParams,
    requests: &[EditRequest],
    prefixes: &Prefixes,
    layers: &[usize],
) -> Result<Vec<SubjectActivations>> {
    let config = &params.config;
    if let Some(&bad) = layers.iter().find(|&&l| l >= config.n_layers) {
        return Err(Error::Input(format!("layer {bad} outside model with {} layers", config.n_layers)));
    }
    let u = requests.len();
    let mut out: Vec<SubjectActivations> = layers
        .iter()
        .map(|&layer| SubjectActivations {
            layer,
            keys: Array2::zeros((u, config.d_ff)),
            outputs: Array2::zeros((u, config.d_model)),
        })
        .collect();
    if u == 0 {
        return Ok(out);
    }
    let jobs: Vec<(usize, usize)> = (0..u).flat_map(|r| (0..prefixes.len()).map(move |c| (r, c))).collect();
    let weight = 1.0 / prefixes.len() as f64;
    for chunk in jobs.chunks(CHUNK) {
        let mut seqs = Vec::with_capacity(chunk.len());
        let mut rows = Vec::with_capacity(chunk.len());
        for &(r, c) in chunk {
            let (seq, row) = prefixes.context(c, &requests[r]);
            seqs.push(seq);
            rows.push(row);
        }
        let batch = Batch::new(&seqs, config)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(params, &mut g, false);
        let fw = forward_graph(&mut g, config, &bound, &batch, &Interventions::default());
        for acts in out.iter_mut() {
            let tap = &fw.layers[acts.layer];
            let keys = g.value(tap.keys);
            let outputs = g.value(tap.output);
            for (j, &(r, _)) in chunk.iter().enumerate() {
                let row = batch.segments[j].start + rows[j];
                acts.keys.row_mut(r).scaled_add(weight, &keys.row(row));
                acts.outputs.row_mut(r).scaled_add(weight, &outputs.row(row));
            }
        }
    }
    Ok(out)
}

/// `u x d_ff` keys at `layer`, averaged over the prefix contexts.
pub fn collect_keys(
    params: &ModelParams,
    requests: &[EditRequest],
    prefixes: &Prefixes,
    layer: usize,
) -> Result<Array2<f64>> {
    Ok(subject_activations(params, requests, prefixes, &[layer])?.remove(0).keys)
}

/// Second moment of keys already stored in the critical layers, gathered
/// from pretraining text.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyBank {
    pub layers: Vec<usize>,
    /// `C0 = K0^T K0` per layer (`d_ff x d_ff`).
    pub covariances: Vec<Array2<f64>>,
    /// Number of keys `n` behind each covariance.
    pub n_samples: usize,
    /// A few of the keys per layer, kept for the preservation statistic.
    pub sample_keys: Vec<Array2<f64>>,
}

const SAMPLE_KEYS: usize = 256;

impl KeyBank {
    /// Keys at every position of shuffled `<bos> sentence` sequences until
    /// `n` keys per layer are collected.
    pub fn collect(
        params: &ModelParams,
        sequences: &[Vec<usize>],
        layers: &[usize],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let config = &params.config;
        if let Some(&bad) = layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::Input(format!("layer {bad} outside model with {} layers", config.n_layers)));
        }
        let available: usize = sequences.iter().map(|s| s.len()).sum();
        if available == 0 {
            return Err(Error::InsufficientData("no text to collect covariance keys from".into()));
        }
        if available < n {
            warn!("{n} covariance keys requested but the text has only {available} positions; using all of them");
        }
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let d_ff = config.d_ff;
        let mut covariances = vec![Array2::<f64>::zeros((d_ff, d_ff)); layers.len()];
        let mut sample_keys = vec![Array2::<f64>::zeros((0, d_ff)); layers.len()];
        let mut taken = 0;
        for chunk in order.chunks(CHUNK) {
            if taken >= n {
                break;
            }
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| sequences[i].as_slice()).collect();
            let batch = Batch::new(&seqs, config)?;
            let mut g = Graph::new();
            let bound = BoundParams::bind(params, &mut g, false);
            let fw = forward_graph(&mut g, config, &bound, &batch, &Interventions::default());
            let take = (n - taken).min(batch.len());
            for (i, &l) in layers.iter().enumerate() {
                let keys = g.value(fw.layers[l].keys).slice(ndarray::s![..take, ..]).to_owned();
                covariances[i] += &keys.t().dot(&keys);
                let room = SAMPLE_KEYS.saturating_sub(sample_keys[i].nrows()).min(take);
                if room > 0 {
                    sample_keys[i]
                        .append(Axis(0), keys.slice(ndarray::s![..room, ..]))
                        .expect("column counts agree");
                }
            }
            taken += take;
        }
        Ok(Self {
            layers: layers.to_vec(),
            covariances,
            n_samples: taken,
            sample_keys,
        })
    }

    /// Key bank over the pretraining text of `records`, leaving out every
    /// sentence that mentions a subject of `excluded` (the facts about to be
    /// rewritten are not associations to preserve).
    pub fn from_records(
        params: &ModelParams,
        records: &[FactRecord],
        excluded: &[FactRecord],
        tok: &Tokenizer,
        layers: &[usize],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let data = PretrainData::build(records, tok, &PretrainConfig { seed, ..PretrainConfig::default() })?;
        let subjects = excluded
            .iter()
            .map(|r| tok.encode(&r.subject))
            .collect::<Result<std::collections::BTreeSet<_>>>()?;
        let seqs: Vec<Vec<usize>> = data
            .sentences
            .iter()
            .filter(|s| !subjects.iter().any(|subj| find_last_token(s, subj).is_some()))
            .map(|s| {
                let mut v = vec![tok.bos()];
                v.extend(s);
                v.truncate(params.config.max_seq_len);
                v
            })
            .collect();
        Self::collect(params, &seqs, layers, n, seed)
    }

    pub fn covariance(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.covariances[i])
    }

    pub fn samples(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.sample_keys[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, TraceRequest};

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 32,
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn request() -> EditRequest {
        EditRequest {
            record_id: 0,
            prompt: vec![5, 6, 7, 8],
            subject_last: 1,
            target: vec![9],
        }
    }

    #[test]
    fn empty_prefix_key_is_the_direct_trace() {
        let p = model();
        let prefixes = Prefixes(vec![vec![1]]);
        let k = collect_keys(&p, &[request()], &prefixes, 1).unwrap();
        let mut trace = TraceRequest::default();
        trace.mlp_keys.insert((1, 2));
        let out = forward(&p, &[1, 5, 6, 7, 8], None, Some(&trace)).unwrap();
        let direct = &out.traces.mlp_keys[&(1, 2)];
        for (a, b) in k.row(0).iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_prefix_key_is_the_mean_of_single_prefix_keys() {
        let p = model();
        let all = Prefixes(vec![vec![1], vec![1, 3, 2], vec![1, 4, 4, 2], vec![1, 7, 2]]);
        let mean = collect_keys(&p, &[request()], &all, 0).unwrap();
        let mut manual = Array2::<f64>::zeros(mean.dim());
        for pre in &all.0 {
            manual += &collect_keys(&p, &[request()], &Prefixes(vec![pre.clone()]), 0).unwrap();
        }
        manual /= 4.0;
        assert!((&mean - &manual).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn duplicate_requests_get_identical_keys() {
        let p = model();
        let k = collect_keys(&p, &[request(), request()], &Prefixes(vec![vec![1], vec![1, 3, 2]]), 0).unwrap();
        assert_eq!(k.row(0), k.row(1));
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let p = model();
        let seqs: Vec<Vec<usize>> = (0..10).map(|i| vec![1, 2 + i % 5, 3, 4 + i % 7]).collect();
        let bank = KeyBank::collect(&p, &seqs, &[0, 1], 30, 0).unwrap();
        let capped = KeyBank::collect(&p, &seqs, &[0], 1000, 0).unwrap();
        assert_eq!(capped.n_samples, 40);
        assert_eq!(bank.n_samples, 30);
        let c = bank.covariance(1).unwrap();
        assert!((c - &c.t()).iter().all(|x| x.abs() < 1e-12));
        let v = ndarray::Array1::from_shape_fn(16, |i| (i as f64).sin());
        assert!(v.dot(&c.dot(&v)) >= 0.0);
    }
}
