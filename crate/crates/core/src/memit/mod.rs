//! Least-squares edits of MLP output matrices.
//!
//! An edit rewrites a batch of facts at once. For every request the subject
//! key (MLP activation at the subject's last token) is averaged over random
//! prefix contexts, and a residual shift of the top critical layer's output is
//! optimized until the model emits the new object. The shift is then spread
//! evenly over the critical layers from the bottom up: each layer solves a
//! regularized least-squares problem that maps its keys onto its share of
//! the remaining shift while leaving preexisting keys (summarized by their
//! covariance) untouched, and keys are recomputed after every layer.

mod context;
mod keys;
mod solve;
mod targets;

use std::path::Path;

use log::{debug, info};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use context::{find_last_token, EditRequest, Prefixes};
pub use keys::{collect_keys, subject_activations, KeyBank, SubjectActivations};
pub use solve::{edit_objective, objective_gradient, solve_delta, stationarity, STATIONARITY_TOL};
pub use targets::{optimize_targets, target_gradient, target_nll, TargetResult};

use crate::container::{config_hash, Container, Tensor};
use crate::dataset::{FactRecord, Language, Tokenizer};
use crate::error::{Error, Result};
use crate::linalg::frobenius;
use crate::model::{round_to_f32, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// 0-based layers whose MLP output matrices are edited, ascending.
    pub critical_layers: Vec<usize>,
    pub target_opt_steps: usize,
    pub target_lr: f64,
    /// Context-averaged NLL of the new object below which target
    /// optimization stops early.
    pub target_nll_gate: f64,
    /// Contexts per request: the bare prompt plus `key_prefix_count - 1`
    /// model-sampled prefixes.
    pub key_prefix_count: usize,
    /// Inclusive length range of sampled prefixes.
    pub prefix_len: (usize, usize),
    /// Preexisting keys `n` behind the covariance.
    pub covariance_sample_count: usize,
    /// Weight of the preservation term.
    pub covariance_scale: f64,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            critical_layers: vec![2, 3, 4],
            target_opt_steps: 25,
            target_lr: 0.2,
            target_nll_gate: 0.05,
            key_prefix_count: 5,
            prefix_len: (2, 10),
            covariance_sample_count: 10_000,
            covariance_scale: 1.0,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let layers = &self.critical_layers;
        if layers.is_empty() {
            return Err(Error::Config("critical_layers must not be empty".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("critical_layers {layers:?} must be strictly increasing")));
        }
        if let Some(&l) = layers.last().filter(|&&l| l >= model.n_layers) {
            return Err(Error::Config(format!(
                "critical layer {l} outside a model with {} layers (layers are 0-based)",
                model.n_layers
            )));
        }
        // The target residual sits at the subject token; only a later
        // attention layer can carry it to the prediction position.
        if let Some(&l) = layers.last().filter(|&&l| l + 1 == model.n_layers) {
            return Err(Error::Config(format!(
                "critical layer {l} is the last layer; an edit there cannot reach the object position"
            )));
        }
        if self.key_prefix_count == 0 {
            return Err(Error::Config("key_prefix_count must be >= 1".into()));
        }
        if !(self.covariance_scale >= 0.0) {
            return Err(Error::Config("covariance_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn top_layer(&self) -> usize {
        *self.critical_layers.last().expect("validated non-empty")
    }
}

/// Per-layer corrections added to `w_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDelta {
    pub layers: Vec<usize>,
    /// `d_ff x d` per layer, f32-representable.
    pub deltas: Vec<Array2<f64>>,
    pub record_ids: Vec<u64>,
    /// `None` when the edit mixes languages.
    pub language: Option<Language>,
    pub config_hash: String,
    /// Free-form record of the run that produced the delta.
    pub provenance: serde_json::Value,
}

impl EditDelta {
    pub fn zeros(model: &ModelConfig, cfg: &EditConfig) -> Self {
        Self {
            layers: cfg.critical_layers.clone(),
            deltas: vec![Array2::zeros((model.d_ff, model.d_model)); cfg.critical_layers.len()],
            record_ids: Vec::new(),
            language: None,
            config_hash: cfg.hash(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn delta(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.deltas[i])
    }

    /// Adds every delta to the matching `w_out` (rounded back to f32).
    pub fn apply_to(&self, params: &mut ModelParams) -> Result<()> {
        for (&l, d) in self.layers.iter().zip(&self.deltas) {
            let w = &mut params
                .layers
                .get_mut(l)
                .ok_or_else(|| Error::Application(format!("delta layer {l} outside the model")))?
                .w_out;
            if w.dim() != d.dim() {
                return Err(Error::Application(format!(
                    "delta for layer {l} is {:?}, w_out is {:?}",
                    d.dim(),
                    w.dim()
                )));
            }
            *w += d;
            round_to_f32(w);
        }
        params.check_finite()
    }

    pub fn save(&self, model: &ModelConfig, path: &Path) -> Result<()> {
        let metadata = json!({
            "kind": "edit_delta",
            "layers": self.layers,
            "record_ids": self.record_ids,
            "language": self.language,
            "config_hash": self.config_hash,
            "provenance": self.provenance,
        });
        let tensors = self
            .layers
            .iter()
            .zip(&self.deltas)
            .map(|(l, d)| (format!("delta.{l}"), Tensor::from_matrix(d)))
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
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            layers: Vec<usize>,
            record_ids: Vec<u64>,
            language: Option<Language>,
            config_hash: String,
            #[serde(default)]
            provenance: serde_json::Value,
        }
        let meta: Meta = serde_json::from_value(c.metadata.clone()).map_err(|e| bad(e.to_string()))?;
        if meta.kind != "edit_delta" {
            return Err(bad(format!("expected an edit delta, found {:?}", meta.kind)));
        }
        let deltas = meta
            .layers
            .iter()
            .map(|l| {
                c.tensor(&format!("delta.{l}"))
                    .ok_or_else(|| bad(format!("missing tensor delta.{l}")))?
                    .to_matrix()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                layers: meta.layers,
                deltas,
                record_ids: meta.record_ids,
                language: meta.language,
                config_hash: meta.config_hash,
                provenance: meta.provenance,
            },
            c.config,
        ))
    }
}

/// Element-wise sum of two deltas over the same layers and configuration.
pub fn merge_deltas(a: &EditDelta, b: &EditDelta) -> Result<EditDelta> {
    if a.config_hash != b.config_hash {
        return Err(Error::Merge(format!(
            "deltas come from different edit configs ({} vs {})",
            a.config_hash, b.config_hash
        )));
    }
    if a.layers != b.layers {
        return Err(Error::Merge(format!("layer sets differ: {:?} vs {:?}", a.layers, b.layers)));
    }
    let mut deltas = Vec::with_capacity(a.deltas.len());
    for ((l, x), y) in a.layers.iter().zip(&a.deltas).zip(&b.deltas) {
        if x.dim() != y.dim() {
            return Err(Error::Merge(format!("layer {l}: shapes {:?} and {:?}", x.dim(), y.dim())));
        }
        let mut s = x + y;
        round_to_f32(&mut s);
        deltas.push(s);
    }
    let mut record_ids = a.record_ids.clone();
    record_ids.extend(&b.record_ids);
    record_ids.sort_unstable();
    record_ids.dedup();
    Ok(EditDelta {
        layers: a.layers.clone(),
        deltas,
        record_ids,
        language: if a.language == b.language { a.language } else { None },
        config_hash: a.config_hash.clone(),
        provenance: serde_json::Value::Null,
    })
}

/// Diagnostics of one critical-layer solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Relative gradient norm of the objective at the solution.
    pub stationarity: f64,
    /// Mean `||k D|| / ||k W_out||` over sampled preexisting keys.
    pub preservation_ratio: f64,
    /// Frobenius norm of the residual share this layer was asked to write.
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStats {
    pub layers: Vec<LayerStats>,
    pub targets_gated: usize,
    pub mean_target_nll: f64,
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub params: ModelParams,
    pub delta: EditDelta,
    pub stats: EditStats,
}

fn preservation_ratio(samples: Option<&Array2<f64>>, w_out: &Array2<f64>, delta: &Array2<f64>) -> f64 {
    let Some(k) = samples.filter(|k| k.nrows() > 0) else {
        return 0.0;
    };
    let change = k.dot(delta);
    let base = k.dot(w_out);
    let ratios: Vec<f64> = change
        .rows()
        .into_iter()
        .zip(base.rows())
        .map(|(c, b)| c.dot(&c).sqrt() / b.dot(&b).sqrt().max(1e-12))
        .collect();
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

fn edit_requests(
    params: &ModelParams,
    requests: &[EditRequest],
    tok: &Tokenizer,
    cfg: &EditConfig,
    bank: &KeyBank,
) -> Result<(ModelParams, Vec<Array2<f64>>, EditStats)> {
    cfg.validate(&params.config)?;
    for &l in &cfg.critical_layers {
        if bank.covariance(l).is_none() {
            return Err(Error::Input(format!("key bank has no covariance for layer {l}")));
        }
    }
    let mut edited = params.clone();
    let (d_ff, d) = (params.config.d_ff, params.config.d_model);
    if requests.is_empty() {
        let stats = EditStats {
            layers: Vec::new(),
            targets_gated: 0,
            mean_target_nll: f64::NAN,
        };
        return Ok((edited, vec![Array2::zeros((d_ff, d)); cfg.critical_layers.len()], stats));
    }
    let top = cfg.top_layer();
    let prefixes = Prefixes::sample(params, tok, cfg.key_prefix_count, cfg.prefix_len, cfg.seed)?;
    let start = subject_activations(params, requests, &prefixes, &[top])?.remove(0).outputs;
    let t = optimize_targets(
        params,
        requests,
        &prefixes,
        top,
        cfg.target_opt_steps,
        cfg.target_lr,
        cfg.target_nll_gate,
    )?;
    let gated = t.gated.iter().filter(|&&g| g).count();
    let mean_nll = t.nll.iter().sum::<f64>() / t.nll.len() as f64;
    info!("targets: {gated}/{} below the NLL gate, mean NLL {mean_nll:.4}", requests.len());
    let goal = &start + &t.deltas;

    let mut deltas = Vec::with_capacity(cfg.critical_layers.len());
    let mut layer_stats = Vec::new();
    let n_layers = cfg.critical_layers.len();
    for (i, &l) in cfg.critical_layers.iter().enumerate() {
        let acts = subject_activations(&edited, requests, &prefixes, &[l, top])?;
        let keys = &acts[0].keys;
        let current = &acts[1].outputs;
        let residual = (&goal - current) / (n_layers - i) as f64;
        let c0 = bank.covariance(l).expect("checked above");
        let mut delta = solve_delta(keys, &residual, c0, cfg.covariance_scale)?;
        round_to_f32(&mut delta);
        let stats = LayerStats {
            layer: l,
            stationarity: stationarity(keys, &residual, c0, cfg.covariance_scale, &delta),
            preservation_ratio: preservation_ratio(bank.samples(l), &edited.layers[l].w_out, &delta),
            residual_norm: frobenius(&residual),
        };
        debug!("layer {l}: {stats:?}");
        let w = &mut edited.layers[l].w_out;
        *w += &delta;
        round_to_f32(w);
        deltas.push(delta);
        layer_stats.push(stats);
    }
    edited.check_finite()?;
    Ok((
        edited,
        deltas,
        EditStats {
            layers: layer_stats,
            targets_gated: gated,
            mean_target_nll: mean_nll,
        },
    ))
}

fn run_edit(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    cfg: &EditConfig,
    bank: &KeyBank,
    language: Option<Language>,
) -> Result<EditOutcome> {
    let requests = EditRequest::from_records(records, tok)?;
    let (edited, deltas, stats) = edit_requests(params, &requests, tok, cfg, bank)?;
    Ok(EditOutcome {
        params: edited,
        delta: EditDelta {
            layers: cfg.critical_layers.clone(),
            deltas,
            record_ids: records.iter().map(|r| r.id).collect(),
            language,
            config_hash: cfg.hash(),
            provenance: serde_json::Value::Null,
        },
        stats,
    })
}

/// Edits `records` (all in one language) into a copy of `params`. Only
/// `w_out` of the critical layers changes.
pub fn apply_edit(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    cfg: &EditConfig,
    bank: &KeyBank,
) -> Result<EditOutcome> {
    let language = records.first().map(|r| r.language);
    if records.iter().any(|r| Some(r.language) != language) {
        return Err(Error::Input(
            "apply_edit expects records of a single language; use joint_edit for mixed batches".into(),
        ));
    }
    run_edit(params, records, tok, cfg, bank, language)
}

/// One edit with the keys and targets of every language stacked into the
/// same least-squares systems.
pub fn joint_edit(
    params: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    cfg: &EditConfig,
    bank: &KeyBank,
) -> Result<EditOutcome> {
    let first = records.first().map(|r| r.language);
    let language = if records.iter().all(|r| Some(r.language) == first) { first } else { None };
    run_edit(params, records, tok, cfg, bank, language)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    fn edit_cfg() -> EditConfig {
        EditConfig {
            critical_layers: vec![0, 1],
            ..EditConfig::default()
        }
    }

    fn sample_delta(seed: f64) -> EditDelta {
        let mut d = EditDelta::zeros(&cfg(), &edit_cfg());
        for (i, m) in d.deltas.iter_mut().enumerate() {
            *m = Array2::from_shape_fn(m.dim(), |(r, c)| ((r * 7 + c + i) as f64 * seed).sin() as f32 as f64);
        }
        d
    }

    #[test]
    fn config_validation() {
        let m = cfg();
        assert!(edit_cfg().validate(&m).is_ok());
        for layers in [vec![], vec![1, 0], vec![1, 1], vec![3], vec![1, 2]] {
            let c = EditConfig {
                critical_layers: layers,
                ..edit_cfg()
            };
            assert!(c.validate(&m).is_err());
        }
    }

    #[test]
    fn merge_with_zero_is_identity_and_commutes() {
        let a = sample_delta(0.3);
        let b = sample_delta(0.7);
        let zero = EditDelta::zeros(&cfg(), &edit_cfg());
        assert_eq!(merge_deltas(&a, &zero).unwrap().deltas, a.deltas);
        assert_eq!(merge_deltas(&a, &b).unwrap(), merge_deltas(&b, &a).unwrap());
    }

    #[test]
    fn merge_rejects_mismatches() {
        let a = sample_delta(0.3);
        let mut b = sample_delta(0.7);
        b.config_hash = "other".into();
        assert!(matches!(merge_deltas(&a, &b), Err(Error::Merge(_))));
        let mut c = sample_delta(0.7);
        c.layers = vec![0, 2];
        assert!(matches!(merge_deltas(&a, &c), Err(Error::Merge(_))));
    }

    #[test]
    fn delta_file_round_trip_is_bit_exact() {
        let mut a = sample_delta(0.9);
        a.record_ids = vec![3, 5];
        a.language = Some(Language::B);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delta.bin");
        a.save(&cfg(), &path).unwrap();
        let (back, model) = EditDelta::load(&path).unwrap();
        assert_eq!(back, a);
        assert_eq!(model, cfg());
        let bytes = std::fs::read(&path).unwrap();
        back.save(&cfg(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn applying_a_delta_touches_only_critical_w_out() {
        let p = ModelParams::init(&cfg()).unwrap();
        let mut q = p.clone();
        sample_delta(0.2).apply_to(&mut q).unwrap();
        for ((name, a), (_, b)) in p.named_tensors().into_iter().zip(q.named_tensors()) {
            let critical = name == "layers.0.w_out" || name == "layers.1.w_out";
            assert_eq!(a == b, !critical, "{name}");
        }
    }
}
