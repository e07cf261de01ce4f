//! Head corrections: learned offsets added to selected attention-head
//! outputs of an edited model, at every position.
//!
//! For each record the loss is
//!
//! ```text
//! lambda / K * sum_(l,h) (||w_lh|| / ||head_lh||)^2       norm penalty
//!   - 1/R * sum_j log P(o* | z_j + prompt)                 prefix NLL
//!   + KL(P_corrected(. | s is a) || P_edited(. | s is a))  drift guard
//! ```
//!
//! where `head_lh` is the (fixed) head activation at the prompt's last token
//! in the uncorrected edited model and `z_j` are model-sampled prefixes held
//! fixed per record.

use std::collections::BTreeSet;
use std::path::Path;

use log::{debug, info};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Var};
use crate::container::{config_hash, Container, Tensor};
use crate::dataset::{encode_prompt, fill, is_a_prompt, FactRecord, Language, Tokenizer};
use crate::error::{Error, Result};
use crate::memit::{apply_edit, EditConfig, EditOutcome, KeyBank, Prefixes};
use crate::model::{
    forward_graph, round_to_f32, Batch, BoundParams, HeadPatch, Interventions, ModelConfig, ModelParams, ModelRef,
};
use crate::optim::{Adam, AdamConfig};
use crate::probe::ProbeDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MematConfig {
    /// Number of corrected heads.
    pub k: usize,
    pub lambda_omega: f64,
    /// Sampled prefixes per record (0: the bare prompt only).
    pub n_prefixes: usize,
    pub prefix_len: (usize, usize),
    pub adam: AdamConfig,
    /// Records per forward batch.
    pub batch_size: usize,
    /// Batches accumulated into one optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    /// Template (with `{}` for the subject) of the KL anchor prompt; `None`
    /// uses each record language's "is a" template.
    pub kl_template: Option<String>,
    pub seed: u64,
}

impl Default for MematConfig {
    fn default() -> Self {
        Self {
            k: 16,
            lambda_omega: 10.0,
            n_prefixes: 4,
            prefix_len: (2, 10),
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            batch_size: 32,
            accumulation: 4,
            epochs: 10,
            kl_template: None,
            seed: 0,
        }
    }
}

impl MematConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_omega >= 0.0 && self.lambda_omega.is_finite()) {
            return Err(Error::Config(format!("lambda_omega must be finite and >= 0, got {}", self.lambda_omega)));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch_size and accumulation must be positive".into()));
        }
        if self.prefix_len.0 > self.prefix_len.1 {
            return Err(Error::Config("prefix length range is empty".into()));
        }
        if let Some(t) = &self.kl_template {
            if !t.contains("{}") {
                return Err(Error::Config(format!("kl_template {t:?} has no subject slot")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// How a correction set was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    Optimized,
    /// Scaled mean of truthful activations.
    MeanActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionMeta {
    pub method: CorrectionMethod,
    /// Language the underlying edit was made in.
    pub edit_language: Option<Language>,
    /// Language of the records the corrections were fit on.
    pub language: Option<Language>,
    pub k: usize,
    pub lambda_omega: f64,
    pub n_prefixes: usize,
    pub epochs: usize,
    pub optimizer_steps: usize,
    /// ITI scale, when `method` is the mean-activation baseline.
    pub alpha: Option<f64>,
    pub record_ids: Vec<u64>,
    pub pair_ids: Vec<u64>,
    pub config_hash: String,
    /// Mean per-record loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Free-form record of the run that produced the set.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Offsets `omega_lh` for the heads of Psi^K.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCorrectionSet {
    pub positions: Vec<(usize, usize)>,
    pub omegas: Vec<Array1<f64>>,
    pub meta: CorrectionMeta,
}

impl HeadCorrectionSet {
    pub fn to_patch(&self) -> HeadPatch {
        let mut p = HeadPatch::new();
        for (&(l, h), w) in self.positions.iter().zip(&self.omegas) {
            p.insert(l, h, w.clone());
        }
        p
    }

    pub fn norms(&self) -> Vec<f64> {
        self.omegas.iter().map(|w| w.dot(w).sqrt()).collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let distinct: BTreeSet<_> = self.positions.iter().collect();
        if distinct.len() != self.positions.len() || self.omegas.len() != self.positions.len() {
            return Err(Error::Application("correction positions must be distinct, one vector each".into()));
        }
        self.to_patch().validate(config)
    }

    pub fn save(&self, model: &ModelConfig, path: &Path) -> Result<()> {
        let metadata = json!({
            "kind": "head_corrections",
            "positions": self.positions,
            "meta": self.meta,
        });
        let tensors = self
            .positions
            .iter()
            .zip(&self.omegas)
            .map(|((l, h), w)| (format!("omega.{l}.{h}"), Tensor::from_vector(w.as_slice().expect("contiguous"))))
            .collect();
        Container {
            config: model.clone(),
            metadata,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelConfig)> {
        let c = Container::load(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("head_corrections") {
            return Err(bad("not a head-correction file".into()));
        }
        let positions: Vec<(usize, usize)> =
            serde_json::from_value(c.metadata["positions"].clone()).map_err(|e| bad(e.to_string()))?;
        let meta: CorrectionMeta = serde_json::from_value(c.metadata["meta"].clone()).map_err(|e| bad(e.to_string()))?;
        let omegas = positions
            .iter()
            .map(|(l, h)| {
                c.tensor(&format!("omega.{l}.{h}"))
                    .map(|t| Array1::from(t.to_vec()))
                    .ok_or_else(|| bad(format!("missing tensor omega.{l}.{h}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self {
            positions,
            omegas,
            meta,
        };
        set.validate(&c.config)?;
        Ok((set, c.config))
    }
}

/// An edited model with corrections attached; the weights are borrowed and
/// never modified, so dropping the patch restores the plain model.
#[derive(Clone, Debug)]
pub struct Patched<'a> {
    pub params: &'a ModelParams,
    pub patch: HeadPatch,
}

impl<'a> Patched<'a> {
    pub fn model(&self) -> ModelRef<'_> {
        ModelRef::patched(self.params, &self.patch)
    }

    pub fn remove(self) -> &'a ModelParams {
        self.params
    }
}

pub fn apply_corrections<'a>(params: &'a ModelParams, set: &HeadCorrectionSet) -> Result<Patched<'a>> {
    set.validate(&params.config)?;
    Ok(Patched {
        params,
        patch: set.to_patch(),
    })
}

/// Per-record inputs of the correction loss.
struct Item {
    /// `(tokens, scored (row, token) pairs)` for every context.
    nll_seqs: Vec<(Vec<usize>, Vec<(usize, usize)>)>,
    kl_seq: Vec<usize>,
    /// Edited-model log-probabilities after the KL prompt.
    reference: Array2<f64>,
    /// `lambda / (K ||head_lh||^2)` per position.
    penalty: Vec<f64>,
}

/// Row-major head activations at the last token of every sequence.
fn last_token_heads(model: ModelRef<'_>, seqs: &[Vec<usize>]) -> Result<Array2<f64>> {
    let params = model.params;
    let config = &params.config;
    let mut out = Array2::zeros((seqs.len(), config.n_layers * config.d_model));
    for (ci, chunk) in seqs.chunks(64).enumerate() {
        let batch = Batch::new(chunk, config)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(params, &mut g, false);
        let hooks = model.patch.map(|p| Interventions::from_patch(&mut g, p)).unwrap_or_default();
        let fw = forward_graph(&mut g, config, &bound, &batch, &hooks);
        for (l, tap) in fw.layers.iter().enumerate() {
            let heads = g.value(tap.heads);
            for (j, seg) in batch.segments.iter().enumerate() {
                out.slice_mut(ndarray::s![ci * 64 + j, l * config.d_model..(l + 1) * config.d_model])
                    .assign(&heads.row(seg.end - 1));
            }
        }
    }
    Ok(out)
}

fn last_log_probs(params: &ModelParams, seqs: &[Vec<usize>]) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let batch = Batch::new(chunk, &params.config)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(params, &mut g, false);
        let fw = forward_graph(&mut g, &params.config, &bound, &batch, &Interventions::default());
        let lp = g.value(fw.log_probs);
        for seg in &batch.segments {
            out.push(lp.row(seg.end - 1).to_owned().insert_axis(Axis(0)));
        }
    }
    Ok(out)
}

fn prepare(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    psi: &[(usize, usize)],
    cfg: &MematConfig,
    contexts: &[Prefixes],
) -> Result<Vec<Item>> {
    let config = &params.config;
    let dh = config.head_dim();
    let mut prompts = Vec::with_capacity(records.len());
    let mut kl_seqs = Vec::with_capacity(records.len());
    for r in records {
        prompts.push(encode_prompt(tok, &r.efficacy_prompt)?);
        let kl_text = match &cfg.kl_template {
            Some(t) => fill(t, &r.subject),
            None => is_a_prompt(r),
        };
        kl_seqs.push(encode_prompt(tok, &kl_text)?);
    }
    let heads = last_token_heads(ModelRef::plain(params), &prompts)?;
    let references = last_log_probs(params, &kl_seqs)?;
    let k = psi.len() as f64;
    let mut items = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let target = tok.encode(&r.target_new)?;
        let body = &prompts[i][1..];
        let nll_seqs = contexts[i]
            .0
            .iter()
            .map(|prefix| {
                let mut seq = prefix.clone();
                seq.extend(body);
                let end = seq.len();
                seq.extend(&target[..target.len() - 1]);
                let picks = target.iter().enumerate().map(|(t, &tk)| (end - 1 + t, tk)).collect();
                (seq, picks)
            })
            .collect();
        let penalty = psi
            .iter()
            .map(|&(l, h)| {
                let start = l * config.d_model + h * dh;
                let v = heads.slice(ndarray::s![i, start..start + dh]);
                cfg.lambda_omega / (k * v.dot(&v).max(1e-12))
            })
            .collect();
        items.push(Item {
            nll_seqs,
            kl_seq: kl_seqs[i].clone(),
            reference: references[i].clone(),
            penalty,
        });
    }
    Ok(items)
}

/// Loss terms of one record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub penalty: f64,
    pub nll: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.penalty + self.nll + self.kl
    }
}

/// Builds the summed loss of `items` over the correction leaves `omegas`.
fn batch_loss<'a>(
    g: &mut Graph<'a>,
    params: &'a ModelParams,
    items: &[&Item],
    psi: &[(usize, usize)],
    omegas: &[Var],
) -> Result<(Var, Vec<LossTerms>)> {
    let config = &params.config;
    let mut seqs: Vec<&[usize]> = Vec::new();
    let mut picks: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut kl_rows = Vec::new();
    let mut offset = 0;
    for item in items {
        let mut p = Vec::new();
        for (seq, sp) in &item.nll_seqs {
            p.extend(sp.iter().map(|&(r, t)| (offset + r, t)));
            offset += seq.len();
            seqs.push(seq);
        }
        picks.push(p);
        offset += item.kl_seq.len();
        kl_rows.push(offset - 1);
        seqs.push(&item.kl_seq);
    }
    let batch = Batch::new(&seqs, config)?;
    let bound = BoundParams::bind(params, g, false);
    let hooks = Interventions {
        head_offsets: psi.iter().zip(omegas).map(|(&(l, h), &w)| (l, h, w)).collect(),
        ..Interventions::default()
    };
    let fw = forward_graph(g, config, &bound, &batch, &hooks);
    let sq: Vec<Var> = omegas.iter().map(|&w| g.sum_sq(w)).collect();
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let r = item.nll_seqs.len().max(1) as f64;
        let s = g.pick_sum(fw.log_probs, &picks[i]);
        let nll = g.scale(s, -1.0 / r);
        let lp = g.rows(fw.log_probs, &[kl_rows[i]]);
        let p = g.exp(lp);
        let reference = g.constant(item.reference.clone());
        let diff = g.sub(lp, reference);
        let prod = g.mul(p, diff);
        let kl = g.sum(prod);
        let mut loss = g.add(nll, kl);
        let mut penalty = 0.0;
        for (j, &c) in item.penalty.iter().enumerate() {
            let term = g.scale(sq[j], c);
            penalty += g.scalar(term);
            loss = g.add(loss, term);
        }
        terms.push(LossTerms {
            penalty,
            nll: g.scalar(nll),
            kl: g.scalar(kl),
        });
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    Ok((total.expect("non-empty batch"), terms))
}

/// Loss terms of every record under fixed corrections `omegas`.
pub fn correction_loss(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    psi: &[(usize, usize)],
    omegas: &[Array1<f64>],
    cfg: &MematConfig,
    contexts: &[Prefixes],
) -> Result<Vec<LossTerms>> {
    let items = prepare(params, records, tok, psi, cfg, contexts)?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let mut g = Graph::new();
        let vars: Vec<Var> = omegas.iter().map(|w| g.constant(w.clone().insert_axis(Axis(0)))).collect();
        let refs: Vec<&Item> = chunk.iter().collect();
        out.extend(batch_loss(&mut g, params, &refs, psi, &vars)?.1);
    }
    Ok(out)
}

/// Gradient of the summed loss of `records` with respect to every omega.
pub fn correction_gradient(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    psi: &[(usize, usize)],
    omegas: &[Array1<f64>],
    cfg: &MematConfig,
    contexts: &[Prefixes],
) -> Result<Vec<Array1<f64>>> {
    let items = prepare(params, records, tok, psi, cfg, contexts)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = omegas.iter().map(|w| g.leaf(w.clone().insert_axis(Axis(0)))).collect();
    let refs: Vec<&Item> = items.iter().collect();
    let (loss, _) = batch_loss(&mut g, params, &refs, psi, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(omegas)
        .map(|(&v, w)| grads.take(v).map(|m| m.row(0).to_owned()).unwrap_or_else(|| Array1::zeros(w.len())))
        .collect())
}

/// The fixed per-record prefix contexts used by [`optimize_corrections`].
pub fn sample_contexts(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    cfg: &MematConfig,
) -> Result<Vec<Prefixes>> {
    records
        .iter()
        .map(|r| {
            if cfg.n_prefixes == 0 {
                return Ok(Prefixes::empty(tok));
            }
            let seed = cfg.seed ^ r.id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            Ok(Prefixes::sample(params, tok, cfg.n_prefixes + 1, cfg.prefix_len, seed)?.sampled_only())
        })
        .collect()
}

fn meta_for(records: &[FactRecord], cfg: &MematConfig, method: CorrectionMethod, k: usize) -> CorrectionMeta {
    let language = records.first().map(|r| r.language).filter(|l| records.iter().all(|r| r.language == *l));
    let mut pair_ids: Vec<u64> = records.iter().map(|r| r.pair_id).collect();
    pair_ids.sort_unstable();
    pair_ids.dedup();
    CorrectionMeta {
        method,
        edit_language: None,
        language,
        k,
        lambda_omega: cfg.lambda_omega,
        n_prefixes: cfg.n_prefixes,
        epochs: cfg.epochs,
        optimizer_steps: 0,
        alpha: None,
        record_ids: records.iter().map(|r| r.id).collect(),
        pair_ids,
        config_hash: cfg.hash(),
        epoch_losses: Vec::new(),
        provenance: serde_json::Value::Null,
    }
}

/// Fits corrections at `psi` on `records` of the edited model `params`.
pub fn optimize_corrections(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    psi: &[(usize, usize)],
    cfg: &MematConfig,
) -> Result<HeadCorrectionSet> {
    let contexts = sample_contexts(params, records, tok, cfg)?;
    optimize_corrections_with(params, records, tok, psi, cfg, &contexts)
}

/// [`optimize_corrections`] with explicit per-record prefix contexts.
pub fn optimize_corrections_with(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    psi: &[(usize, usize)],
    cfg: &MematConfig,
    contexts: &[Prefixes],
) -> Result<HeadCorrectionSet> {
    cfg.validate()?;
    if psi.is_empty() {
        return Err(Error::Input("the head set is empty".into()));
    }
    if records.is_empty() {
        return Err(Error::Input("no records to fit corrections on".into()));
    }
    if contexts.len() != records.len() {
        return Err(Error::Input("one prefix set per record is required".into()));
    }
    let config = &params.config;
    let dh = config.head_dim();
    let mut omegas = vec![Array2::<f64>::zeros((1, dh)); psi.len()];
    HeadCorrectionSet {
        positions: psi.to_vec(),
        omegas: vec![Array1::zeros(dh); psi.len()],
        meta: meta_for(records, cfg, CorrectionMethod::Optimized, psi.len()),
    }
    .validate(config)?;
    let items = prepare(params, records, tok, psi, cfg, contexts)?;
    let mut adam = Adam::new(cfg.adam, vec![(1, dh); psi.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = vec![Array2::<f64>::zeros((1, dh)); psi.len()];
        let mut acc_records = 0usize;
        let mut acc_batches = 0usize;
        let mut epoch_total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let vars: Vec<Var> = omegas.iter().map(|w| g.leaf(w.clone())).collect();
            let refs: Vec<&Item> = batch.iter().map(|&i| &items[i]).collect();
            let (loss, terms) = batch_loss(&mut g, params, &refs, psi, &vars)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Optimization(format!("loss is {value} in epoch {epoch}")));
            }
            epoch_total += terms.iter().map(LossTerms::total).sum::<f64>();
            let mut grads = g.backward(loss)?;
            for (a, &v) in acc.iter_mut().zip(&vars) {
                if let Some(gv) = grads.take(v) {
                    *a += &gv;
                }
            }
            acc_records += batch.len();
            acc_batches += 1;
            if acc_batches == cfg.accumulation || bi + 1 == batches.len() {
                for a in acc.iter_mut() {
                    *a /= acc_records as f64;
                }
                adam.step(omegas.iter_mut(), &acc);
                for w in omegas.iter_mut() {
                    round_to_f32(w);
                }
                acc.iter_mut().for_each(|a| a.fill(0.0));
                acc_records = 0;
                acc_batches = 0;
            }
        }
        let mean = epoch_total / items.len() as f64;
        debug!("corrections epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if let (Some(first), Some(last)) = (epoch_losses.first(), epoch_losses.last()) {
        info!("corrections: mean loss {first:.4} -> {last:.4} over {} epochs", cfg.epochs);
    }
    let mut meta = meta_for(records, cfg, CorrectionMethod::Optimized, psi.len());
    meta.optimizer_steps = adam.steps() as usize;
    meta.epoch_losses = epoch_losses;
    Ok(HeadCorrectionSet {
        positions: psi.to_vec(),
        omegas: omegas.into_iter().map(|w| w.row(0).to_owned()).collect(),
        meta,
    })
}

/// Edits `new_records` into `base` and attaches corrections trained on a
/// different set of facts. Shared records or pairs are a protocol error
/// unless `allow_overlap` is set.
pub fn recycle_corrections(
    base: &ModelParams,
    new_records: &[FactRecord],
    tok: &Tokenizer,
    old: &HeadCorrectionSet,
    edit_cfg: &EditConfig,
    bank: &KeyBank,
    allow_overlap: bool,
) -> Result<(EditOutcome, HeadPatch)> {
    if !allow_overlap {
        let ids: BTreeSet<u64> = old.meta.record_ids.iter().copied().collect();
        let pairs: BTreeSet<u64> = old.meta.pair_ids.iter().copied().collect();
        if let Some(r) = new_records.iter().find(|r| ids.contains(&r.id) || pairs.contains(&r.pair_id)) {
            return Err(Error::Protocol(format!(
                "record {} (pair {}) was already used to train the corrections",
                r.id, r.pair_id
            )));
        }
    }
    old.validate(&base.config)?;
    let outcome = apply_edit(base, new_records, tok, edit_cfg, bank)?;
    Ok((outcome, old.to_patch()))
}

/// Mean-activation baseline: `omega_lh = alpha * mean` of the label-1
/// activations at each head of `psi`.
pub fn iti_baseline(data: &ProbeDataset, psi: &[(usize, usize)], alpha: f64) -> Result<HeadCorrectionSet> {
    if psi.is_empty() {
        return Err(Error::Input("the head set is empty".into()));
    }
    let mut omegas = Vec::with_capacity(psi.len());
    for &(l, h) in psi {
        if l >= data.n_layers || h >= data.n_heads {
            return Err(Error::Input(format!("head ({l}, {h}) outside the probe dataset")));
        }
        let mut w = (data.truthful_mean(l, h)? * alpha).insert_axis(Axis(0));
        round_to_f32(&mut w);
        omegas.push(w.row(0).to_owned());
    }
    let cfg = MematConfig {
        k: psi.len(),
        ..MematConfig::default()
    };
    let mut meta = meta_for(&[], &cfg, CorrectionMethod::MeanActivation, psi.len());
    meta.record_ids = data.records();
    meta.alpha = Some(alpha);
    meta.epochs = 0;
    Ok(HeadCorrectionSet {
        positions: psi.to_vec(),
        omegas,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{by_language, corpus_tokenizer, generate_corpus, CorpusConfig};
    use crate::model::{forward, sequence_logprob};
    use crate::probe::collect_probe_data;

    fn setup() -> (Vec<FactRecord>, Tokenizer, ModelParams) {
        let recs = generate_corpus(&CorpusConfig {
            n_pairs: 12,
            seed: 3,
            ..CorpusConfig::default()
        })
        .unwrap();
        let tok = corpus_tokenizer(&recs);
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: tok.len(),
            max_seq_len: 40,
            ..ModelConfig::default()
        };
        let recs = by_language(&recs, Language::A);
        (recs, tok, ModelParams::init(&cfg).unwrap())
    }

    fn small_cfg() -> MematConfig {
        MematConfig {
            k: 2,
            n_prefixes: 1,
            prefix_len: (2, 3),
            batch_size: 4,
            accumulation: 1,
            epochs: 5,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            ..MematConfig::default()
        }
    }

    const PSI: [(usize, usize); 2] = [(0, 1), (1, 0)];

    #[test]
    fn empty_head_set_is_rejected() {
        let (recs, tok, p) = setup();
        assert!(matches!(
            optimize_corrections(&p, &recs, &tok, &[], &small_cfg()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn kl_is_zero_without_corrections_and_nonnegative_with() {
        let (recs, tok, p) = setup();
        let cfg = small_cfg();
        let ctx = sample_contexts(&p, &recs, &tok, &cfg).unwrap();
        let zero = vec![Array1::zeros(8); 2];
        for t in correction_loss(&p, &recs, &tok, &PSI, &zero, &cfg, &ctx).unwrap() {
            assert!(t.kl.abs() < 1e-12);
            assert_eq!(t.penalty, 0.0);
        }
        let w = vec![Array1::from_elem(8, 0.7), Array1::from_elem(8, -0.4)];
        for t in correction_loss(&p, &recs, &tok, &PSI, &w, &cfg, &ctx).unwrap() {
            assert!(t.kl >= 0.0);
            assert!(t.penalty > 0.0);
        }
    }

    #[test]
    fn single_bare_context_is_plain_nll() {
        let (recs, tok, p) = setup();
        let ctx = vec![Prefixes::empty(&tok); recs.len()];
        let zero = vec![Array1::zeros(8); 2];
        let terms = correction_loss(&p, &recs, &tok, &PSI, &zero, &small_cfg(), &ctx).unwrap();
        for (r, t) in recs.iter().zip(&terms) {
            let prompt = encode_prompt(&tok, &r.efficacy_prompt).unwrap();
            let lp = sequence_logprob(&p, &prompt, &tok.encode(&r.target_new).unwrap(), None).unwrap();
            assert!((t.nll + lp).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (recs, tok, p) = setup();
        let cfg = small_cfg();
        let recs = &recs[..3];
        let ctx = sample_contexts(&p, recs, &tok, &cfg).unwrap();
        let w = vec![Array1::from_shape_fn(8, |i| 0.1 * i as f64 - 0.3), Array1::from_elem(8, 0.2)];
        let grad = correction_gradient(&p, recs, &tok, &PSI, &w, &cfg, &ctx).unwrap();
        let total = |w: &[Array1<f64>]| -> f64 {
            correction_loss(&p, recs, &tok, &PSI, w, &cfg, &ctx).unwrap().iter().map(LossTerms::total).sum()
        };
        let eps = 1e-5;
        for j in 0..2 {
            for i in [0, 3, 7] {
                let mut plus = w.clone();
                plus[j][i] += eps;
                let mut minus = w.clone();
                minus[j][i] -= eps;
                let fd = (total(&plus) - total(&minus)) / (2.0 * eps);
                let an = grad[j][i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn training_lowers_the_loss_and_huge_penalty_pins_corrections() {
        let (recs, tok, mut p) = setup();
        // Random-init head outputs are tiny; scale them to a trained model's
        // magnitude so the penalty and likelihood terms compete.
        for layer in p.layers.iter_mut() {
            layer.w_v *= 25.0;
        }
        let set = optimize_corrections(&p, &recs, &tok, &PSI, &small_cfg()).unwrap();
        let losses = &set.meta.epoch_losses;
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
        let mut norms = Vec::new();
        for lambda in [1.0, 1e2, 1e6] {
            let cfg = MematConfig {
                lambda_omega: lambda,
                epochs: 20,
                adam: MematConfig::default().adam,
                ..small_cfg()
            };
            let set = optimize_corrections(&p, &recs, &tok, &PSI, &cfg).unwrap();
            norms.push(set.norms().iter().cloned().fold(0.0, f64::max));
        }
        assert!(norms[0] >= norms[1] && norms[1] >= norms[2], "{norms:?}");
        let prompts: Vec<Vec<usize>> = recs.iter().map(|r| encode_prompt(&tok, &r.efficacy_prompt).unwrap()).collect();
        let heads = last_token_heads(ModelRef::plain(&p), &prompts).unwrap();
        let typical = PSI
            .iter()
            .map(|&(l, h)| {
                let block = heads.slice(ndarray::s![.., l * 16 + h * 8..l * 16 + h * 8 + 8]);
                block.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / block.nrows() as f64
            })
            .fold(f64::INFINITY, f64::min);
        assert!(norms[2] < 1e-3 * typical, "{} vs {typical}", norms[2]);
    }

    #[test]
    fn zero_corrections_leave_outputs_unchanged_and_removal_is_exact() {
        let (recs, tok, p) = setup();
        let seq = encode_prompt(&tok, &recs[0].efficacy_prompt).unwrap();
        let plain = forward(&p, &seq, None, None).unwrap().probs;
        let zero = iti_baseline(&probe_data(&p, &recs, &tok), &PSI, 0.0).unwrap();
        assert!(zero.omegas.iter().all(|w| w.iter().all(|&x| x == 0.0)));
        let patched = apply_corrections(&p, &zero).unwrap();
        assert_eq!(forward(patched.params, &seq, Some(&patched.patch), None).unwrap().probs, plain);
        let set = HeadCorrectionSet {
            omegas: vec![Array1::from_elem(8, 0.5); 2],
            ..zero
        };
        let patched = apply_corrections(&p, &set).unwrap();
        assert_ne!(forward(patched.params, &seq, Some(&patched.patch), None).unwrap().probs, plain);
        let restored = patched.remove();
        assert_eq!(forward(restored, &seq, None, None).unwrap().probs, plain);
    }

    #[test]
    fn layer_zero_shift_is_omega_times_output_projection() {
        let (recs, tok, p) = setup();
        let seq = encode_prompt(&tok, &recs[0].efficacy_prompt).unwrap();
        let w = Array1::from_shape_fn(8, |i| (i as f64 * 0.37).sin());
        let mut patch = HeadPatch::new();
        patch.insert(0, 1, w.clone());
        let trace = |patch: Option<&HeadPatch>| {
            let mut t = crate::model::TraceRequest::default();
            t.residuals.insert((0, 2));
            forward(&p, &seq, patch, Some(&t)).unwrap().traces.residuals[&(0, 2)].clone()
        };
        let shift = trace(Some(&patch)) - trace(None);
        let expected = w.dot(&p.layers[0].w_o.slice(ndarray::s![8..16, ..]));
        assert!((shift - expected).iter().all(|x| x.abs() < 1e-12));
    }

    fn probe_data(p: &ModelParams, recs: &[FactRecord], tok: &Tokenizer) -> ProbeDataset {
        collect_probe_data(ModelRef::plain(p), recs, tok, false, 0).unwrap()
    }

    #[test]
    fn mean_activation_baseline_is_linear_in_alpha() {
        let (recs, tok, p) = setup();
        let data = probe_data(&p, &recs, &tok);
        let one = iti_baseline(&data, &PSI, 1.0).unwrap();
        let three = iti_baseline(&data, &PSI, 3.0).unwrap();
        for (a, b) in one.omegas.iter().zip(&three.omegas) {
            assert!((a * 3.0 - b).iter().all(|x| x.abs() < 1e-5));
        }
        assert_eq!(one.meta.alpha, Some(1.0));
    }

    #[test]
    fn recycling_onto_trained_records_is_a_protocol_error() {
        let (recs, tok, p) = setup();
        let set = optimize_corrections(&p, &recs[..4], &tok, &PSI, &MematConfig { epochs: 1, ..small_cfg() }).unwrap();
        let edit = EditConfig {
            critical_layers: vec![0],
            covariance_sample_count: 50,
            target_opt_steps: 2,
            ..EditConfig::default()
        };
        let bank = KeyBank::from_records(&p, &recs, &[], &tok, &[0], 50, 0).unwrap();
        let err = recycle_corrections(&p, &recs[2..6], &tok, &set, &edit, &bank, false).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let (outcome, patch) = recycle_corrections(&p, &recs[4..8], &tok, &set, &edit, &bank, false).unwrap();
        assert_eq!(patch, set.to_patch());
        assert_eq!(outcome.delta.record_ids.len(), 4);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let (recs, tok, p) = setup();
        let set = optimize_corrections(&p, &recs, &tok, &PSI, &MematConfig { epochs: 2, ..small_cfg() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        set.save(&p.config, &path).unwrap();
        let (back, cfg) = HeadCorrectionSet::load(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(cfg, p.config);
    }
}
