//! Configuration-driven pipeline: generate, pretrain, edit, probe, optimize,
//! evaluate, sweep, scale and recycle, each stage reading and writing only
//! its declared artifacts.
//!
//! Every artifact carries the hash of the configuration sections it depends
//! on (its own and all upstream ones) together with the seed; a stage refuses
//! inputs whose hash does not match the current configuration unless forced.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{config_hash, load_checkpoint, save_checkpoint};
use crate::dataset::{
    by_language, by_pairs, corpus_tokenizer, generate_corpus, pair_ids, pair_subject_jaccard, pretrain, CorpusConfig,
    FactRecord, Language, PretrainConfig, PretrainReport, Tokenizer,
};
use crate::error::{Error, Result};
use crate::eval::{
    crosslingual_matrix, evaluate, k_sweep, reports_csv, scaling_curves, CrossLingualMatrix, KSweep, MetricsReport,
    ScalingCurves, ScalingSchedule,
};
use crate::memat::{optimize_corrections, recycle_corrections, HeadCorrectionSet, MematConfig};
use crate::memit::{apply_edit, EditConfig, EditDelta, KeyBank};
use crate::model::{Activation, ModelConfig, ModelParams, ModelRef};
use crate::probe::{chance_bound, collect_probe_data, select_top_k, train_probes, ProbeReport, ProbeTraining};

pub const CONFIG_VERSION: u32 = 1;

/// Artifact locations; relative paths are resolved against `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub delta: PathBuf,
    pub probe: PathBuf,
    pub corrections: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: "runs/toy".into(),
            corpus: "corpus.json".into(),
            checkpoint: "base.ckpt".into(),
            delta: "edit_delta.bin".into(),
            probe: "probe.json".into(),
            corrections: "corrections.bin".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    /// Keep only records the edited model completes with the new object.
    pub refine: bool,
    pub training: ProbeTraining,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            refine: false,
            training: ProbeTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Language the MLP edit is made in.
    pub edit_language: Language,
    /// Language the probes and corrections are fit in.
    pub correction_language: Language,
    /// Pairs per edited block.
    pub n_edit: usize,
    /// Position of block A (edited, corrected) in corpus pair order.
    pub block_a_offset: usize,
    /// Position of the disjoint block B used for recycling.
    pub block_b_offset: usize,
    pub k_values: Vec<usize>,
    /// Scaling-schedule indices `i` (edit sizes `n_i`).
    pub scale_indices: Vec<usize>,
    /// Worker threads for per-record work (0: all cores).
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            edit_language: Language::A,
            correction_language: Language::A,
            n_edit: 50,
            block_a_offset: 0,
            block_b_offset: 50,
            k_values: vec![8, 16],
            scale_indices: vec![0, 2, 4, 6, 8],
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Added to every component seed.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    /// `vocab_size` is taken from the corpus tokenizer.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub edit: EditConfig,
    pub probe: ProbeOptions,
    pub memat: MematConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    /// The desk-scale toy the defaults were calibrated on.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig {
                n_pairs: 150,
                subject_words: 300,
                seed: 1,
                ..CorpusConfig::default()
            },
            model: ModelConfig {
                n_layers: 4,
                n_heads: 8,
                d_model: 64,
                d_ff: 512,
                activation: Activation::Relu,
                max_seq_len: 48,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 6000,
                lr: 1e-3,
                eval_every: 0,
                ..PretrainConfig::default()
            },
            edit: EditConfig {
                critical_layers: vec![0, 1],
                covariance_scale: 0.02,
                target_opt_steps: 100,
                ..EditConfig::default()
            },
            probe: ProbeOptions::default(),
            memat: MematConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Dotted field path set to a TOML literal (bare words become strings).
fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").expect("parsed key"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {key} is not inside a table")))?;
        if keys.peek().is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override path".into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `key=value` overrides whose keys are dotted field paths, e.g.
    /// `edit.covariance_scale=0.05` or `eval.k_values=[8,16,32]`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.corpus.validate()?;
        self.edit.validate(&self.model)?;
        self.memat.validate()?;
        let e = &self.eval;
        if e.n_edit == 0 {
            return Err(Error::Config("eval.n_edit must be positive".into()));
        }
        let a = e.block_a_offset..e.block_a_offset + e.n_edit;
        let b = e.block_b_offset..e.block_b_offset + e.n_edit;
        if a.start < b.end && b.start < a.end {
            return Err(Error::Config(format!("blocks A {a:?} and B {b:?} overlap")));
        }
        ScalingSchedule::new(e.scale_indices.clone())?;
        Ok(())
    }

    /// Copy with the top-level seed folded into every component seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.corpus.seed = c.corpus.seed.wrapping_add(s);
        c.model.seed = c.model.seed.wrapping_add(s);
        c.pretrain.seed = c.pretrain.seed.wrapping_add(s);
        c.edit.seed = c.edit.seed.wrapping_add(s);
        c.memat.seed = c.memat.seed.wrapping_add(s);
        c
    }

    pub fn hash(&self) -> String {
        config_hash(&(&self.seed, &self.corpus, &self.model, &self.pretrain, &self.edit, &self.probe, &self.memat, &self.eval))
    }
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Pretrain,
    Edit,
    Probe,
    Optimize,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Edit => "edit",
            Stage::Probe => "probe",
            Stage::Optimize => "optimize",
        }
    }
}

/// Which model composition `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    Baseline,
    Memit,
    Memat,
}

impl Against {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Against::Baseline),
            "memit" => Ok(Against::Memit),
            "memat" => Ok(Against::Memat),
            other => Err(Error::Input(format!("unknown model composition {other:?} (baseline, memit, memat)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Against::Baseline => "baseline",
            Against::Memit => "memit",
            Against::Memat => "memat",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    provenance: Value,
    records: Vec<FactRecord>,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    provenance: Value,
    report: ProbeReport,
    shuffled_max: f64,
    chance_bound: f64,
}

/// MEMIT-only and recycled-correction reports on block B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecycleReport {
    pub memit: Vec<MetricsReport>,
    pub memat: Vec<MetricsReport>,
}

/// A configured pipeline rooted at `cfg.paths.root`.
pub struct Experiment {
    cfg: ExperimentConfig,
    force: bool,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.resolved(),
            force,
        })
    }

    /// The configuration with seeds resolved.
    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        let p = &self.cfg.paths;
        p.resolve(match stage {
            Stage::Gen => &p.corpus,
            Stage::Pretrain => &p.checkpoint,
            Stage::Edit => &p.delta,
            Stage::Probe => &p.probe,
            Stage::Optimize => &p.corrections,
        })
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.cfg.paths.resolve(&self.cfg.paths.reports)
    }

    /// Hash of the configuration sections `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let e = &c.eval;
        match stage {
            Stage::Gen => config_hash(&("gen", &c.corpus)),
            Stage::Pretrain => config_hash(&("pretrain", self.stage_hash(Stage::Gen), &c.model, &c.pretrain)),
            Stage::Edit => config_hash(&(
                "edit",
                self.stage_hash(Stage::Pretrain),
                &c.edit,
                e.edit_language,
                e.n_edit,
                e.block_a_offset,
            )),
            Stage::Probe => config_hash(&("probe", self.stage_hash(Stage::Edit), &c.probe, e.correction_language)),
            Stage::Optimize => config_hash(&("optimize", self.stage_hash(Stage::Probe), &c.memat)),
        }
    }

    fn provenance(&self, stage: Stage) -> Value {
        json!({
            "stage": stage,
            "stage_hash": self.stage_hash(stage),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
        })
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let path = self.path(stage);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: stage.command().into(),
            });
        }
        Ok(path)
    }

    fn check(&self, stage: Stage, path: &Path, provenance: &Value) -> Result<()> {
        let expected = self.stage_hash(stage);
        let found = provenance.get("stage_hash").and_then(Value::as_str).unwrap_or("none");
        if found == expected {
            return Ok(());
        }
        if self.force {
            warn!("{} was produced by config {found}, current is {expected}; continuing (forced)", path.display());
            return Ok(());
        }
        Err(Error::ConfigMismatch {
            path: path.to_path_buf(),
            found: found.into(),
            expected,
        })
    }

    fn write(&self, path: &Path, contents: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)?;
        Ok(())
    }

    fn block(&self, records: &[FactRecord], offset: usize) -> Result<Vec<FactRecord>> {
        let ids = pair_ids(records);
        let n = self.cfg.eval.n_edit;
        if offset + n > ids.len() {
            return Err(Error::Input(format!(
                "block [{offset}, {}) exceeds the corpus's {} pairs",
                offset + n,
                ids.len()
            )));
        }
        let chosen: HashSet<u64> = ids[offset..offset + n].iter().copied().collect();
        Ok(by_pairs(records, &chosen))
    }

    /// Both languages of the pairs in block A.
    pub fn block_a(&self, records: &[FactRecord]) -> Result<Vec<FactRecord>> {
        self.block(records, self.cfg.eval.block_a_offset)
    }

    pub fn block_b(&self, records: &[FactRecord]) -> Result<Vec<FactRecord>> {
        self.block(records, self.cfg.eval.block_b_offset)
    }

    fn bank(&self, base: &ModelParams, records: &[FactRecord], edited: &[FactRecord], tok: &Tokenizer) -> Result<KeyBank> {
        let e = &self.cfg.edit;
        KeyBank::from_records(base, records, edited, tok, &e.critical_layers, e.covariance_sample_count, e.seed)
    }

    // --- stages -------------------------------------------------------------

    pub fn gen(&self) -> Result<Vec<FactRecord>> {
        let records = generate_corpus(&self.cfg.corpus)?;
        let file = CorpusFile {
            provenance: self.provenance(Stage::Gen),
            records,
        };
        let path = self.path(Stage::Gen);
        self.write(&path, &serde_json::to_string_pretty(&file)?)?;
        info!("wrote {} records to {}", file.records.len(), path.display());
        Ok(file.records)
    }

    pub fn load_corpus(&self) -> Result<(Vec<FactRecord>, Tokenizer)> {
        let path = self.require(Stage::Gen)?;
        let file: CorpusFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        self.check(Stage::Gen, &path, &file.provenance)?;
        for r in &file.records {
            r.validate()?;
        }
        let tok = corpus_tokenizer(&file.records);
        Ok((file.records, tok))
    }

    pub fn pretrain(&self) -> Result<PretrainReport> {
        let (records, tok) = self.load_corpus()?;
        let config = ModelConfig {
            vocab_size: tok.len(),
            ..self.cfg.model.clone()
        };
        let mut params = ModelParams::init(&config)?;
        let report = pretrain(&mut params, &records, &tok, &self.cfg.pretrain)?;
        info!("pretrained: recall {:.3}, final loss {:.4}", report.recall, report.final_loss);
        let mut meta = self.provenance(Stage::Pretrain);
        meta["report"] = serde_json::to_value(&report)?;
        let path = self.path(Stage::Pretrain);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(&params, meta, &path)?;
        Ok(report)
    }

    pub fn load_base(&self) -> Result<ModelParams> {
        let path = self.require(Stage::Pretrain)?;
        let (params, meta) = load_checkpoint(&path)?;
        self.check(Stage::Pretrain, &path, &meta)?;
        Ok(params)
    }

    pub fn edit(&self) -> Result<EditDelta> {
        let (records, tok) = self.load_corpus()?;
        let base = self.load_base()?;
        let block = self.block_a(&records)?;
        let bank = self.bank(&base, &records, &block, &tok)?;
        let outcome = apply_edit(&base, &by_language(&block, self.cfg.eval.edit_language), &tok, &self.cfg.edit, &bank)?;
        info!("edit: {}/{} targets gated", outcome.stats.targets_gated, block.len() / 2);
        let mut delta = outcome.delta;
        delta.provenance = self.provenance(Stage::Edit);
        delta.provenance["stats"] = serde_json::to_value(&outcome.stats)?;
        delta.save(&base.config, &self.path(Stage::Edit))?;
        Ok(delta)
    }

    pub fn load_edited(&self) -> Result<ModelParams> {
        let mut params = self.load_base()?;
        let path = self.require(Stage::Edit)?;
        let (delta, _) = EditDelta::load(&path)?;
        self.check(Stage::Edit, &path, &delta.provenance)?;
        delta.apply_to(&mut params)?;
        Ok(params)
    }

    pub fn probe(&self) -> Result<ProbeReport> {
        let (records, tok) = self.load_corpus()?;
        let edited = self.load_edited()?;
        let block = by_language(&self.block_a(&records)?, self.cfg.eval.correction_language);
        let opts = &self.cfg.probe;
        let data = collect_probe_data(ModelRef::plain(&edited), &block, &tok, opts.refine, self.cfg.edit.seed)?;
        let (classifiers, accuracy) = train_probes(&data, &opts.training)?;
        let (_, shuffled) = train_probes(&data.shuffled_labels(self.cfg.edit.seed ^ 1), &opts.training)?;
        let psi = select_top_k(&accuracy, self.cfg.memat.k)?;
        info!(
            "probe: max validation accuracy {:.3} (shuffled {:.3}, chance bound {:.3})",
            accuracy.max(),
            shuffled.max(),
            chance_bound(data.validation.len())
        );
        let report = ProbeReport {
            accuracy,
            psi,
            classifiers,
            n_records: data.records().len(),
            refined: opts.refine,
        };
        let file = ProbeFile {
            provenance: self.provenance(Stage::Probe),
            shuffled_max: shuffled.max(),
            chance_bound: chance_bound(data.validation.len()),
            report,
        };
        self.write(&self.path(Stage::Probe), &serde_json::to_string_pretty(&file)?)?;
        self.write(&self.reports_dir().join("probe_accuracy.csv"), &file.report.accuracy.to_csv())?;
        Ok(file.report)
    }

    pub fn load_probe(&self) -> Result<ProbeReport> {
        let path = self.require(Stage::Probe)?;
        let file: ProbeFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        self.check(Stage::Probe, &path, &file.provenance)?;
        Ok(file.report)
    }

    pub fn optimize(&self) -> Result<HeadCorrectionSet> {
        let (records, tok) = self.load_corpus()?;
        let edited = self.load_edited()?;
        let probe = self.load_probe()?;
        let block = by_language(&self.block_a(&records)?, self.cfg.eval.correction_language);
        let mut set = optimize_corrections(&edited, &block, &tok, &probe.psi, &self.cfg.memat)?;
        set.meta.edit_language = Some(self.cfg.eval.edit_language);
        set.meta.provenance = self.provenance(Stage::Optimize);
        set.save(&edited.config, &self.path(Stage::Optimize))?;
        Ok(set)
    }

    pub fn load_corrections(&self) -> Result<HeadCorrectionSet> {
        let path = self.require(Stage::Optimize)?;
        let (set, _) = HeadCorrectionSet::load(&path)?;
        self.check(Stage::Optimize, &path, &set.meta.provenance)?;
        Ok(set)
    }

    fn report_meta(&self, what: &str) -> Value {
        json!({
            "report": what,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "edit_language": self.cfg.eval.edit_language,
            "correction_language": self.cfg.eval.correction_language,
        })
    }

    /// Scores block A in both languages with the chosen composition and
    /// writes `eval_<against>.{json,csv}`; `memit` also writes the
    /// Jaccard-stratified cross-lingual table.
    pub fn eval(&self, against: Against) -> Result<Vec<MetricsReport>> {
        let (records, tok) = self.load_corpus()?;
        let block = self.block_a(&records)?;
        let base;
        let edited;
        let patch;
        let model = match against {
            Against::Baseline => {
                base = self.load_base()?;
                ModelRef::plain(&base)
            }
            Against::Memit => {
                edited = self.load_edited()?;
                ModelRef::plain(&edited)
            }
            Against::Memat => {
                edited = self.load_edited()?;
                patch = self.load_corrections()?.to_patch();
                ModelRef::patched(&edited, &patch)
            }
        };
        let mut reports = Vec::new();
        for lang in Language::BOTH {
            let mut r = evaluate(model, &block, &tok, lang)?;
            r.metadata = self.report_meta(against.name());
            info!("{}: {}", against.name(), r.summary());
            reports.push(r);
        }
        let dir = self.reports_dir();
        let name = against.name();
        self.write(&dir.join(format!("eval_{name}.json")), &serde_json::to_string_pretty(&reports)?)?;
        self.write(
            &dir.join(format!("eval_{name}.csv")),
            &reports_csv(reports.iter().map(|r| (name, r))),
        )?;
        if against == Against::Memit {
            let m = crosslingual_matrix(&[(self.cfg.eval.edit_language, model)], &block, &tok)?;
            self.write(&dir.join("crosslingual.csv"), &m.to_csv())?;
        }
        Ok(reports)
    }

    /// Cross-lingual matrix of the stored edit.
    pub fn crosslingual(&self) -> Result<CrossLingualMatrix> {
        let (records, tok) = self.load_corpus()?;
        let edited = self.load_edited()?;
        let block = self.block_a(&records)?;
        crosslingual_matrix(&[(self.cfg.eval.edit_language, ModelRef::plain(&edited))], &block, &tok)
    }

    pub fn sweep(&self) -> Result<KSweep> {
        let (records, tok) = self.load_corpus()?;
        let edited = self.load_edited()?;
        let probe = self.load_probe()?;
        let lang = self.cfg.eval.correction_language;
        let block = by_language(&self.block_a(&records)?, lang);
        let mut sweep = k_sweep(&edited, &block, &tok, &probe.accuracy, &self.cfg.eval.k_values, &self.cfg.memat, lang)?;
        sweep.baseline.metadata = self.report_meta("k_sweep");
        let dir = self.reports_dir();
        self.write(&dir.join("k_sweep.csv"), &sweep.to_csv())?;
        self.write(&dir.join("k_sweep.json"), &serde_json::to_string_pretty(&sweep)?)?;
        Ok(sweep)
    }

    /// Edit-size curves on edit-language records outside block A, with the
    /// block-A corrections recycled at every size.
    pub fn scale(&self) -> Result<ScalingCurves> {
        let (records, tok) = self.load_corpus()?;
        let base = self.load_base()?;
        let corrections = self.load_corrections()?;
        let used: HashSet<u64> = self.block_a(&records)?.iter().map(|r| r.pair_id).collect();
        let pool: Vec<FactRecord> = by_language(&records, self.cfg.eval.edit_language)
            .into_iter()
            .filter(|r| !used.contains(&r.pair_id))
            .collect();
        let schedule = ScalingSchedule::new(self.cfg.eval.scale_indices.clone())?;
        let curves = scaling_curves(&base, &pool, &tok, &schedule, &corrections, &self.cfg.edit, |block| {
            self.bank(&base, &records, block, &tok)
        })?;
        let dir = self.reports_dir();
        self.write(&dir.join("scaling.csv"), &curves.to_csv())?;
        self.write(&dir.join("scaling.json"), &serde_json::to_string_pretty(&curves)?)?;
        Ok(curves)
    }

    /// Edits block B and attaches the block-A corrections.
    pub fn recycle(&self) -> Result<RecycleReport> {
        let (records, tok) = self.load_corpus()?;
        let base = self.load_base()?;
        let corrections = self.load_corrections()?;
        let block = self.block_b(&records)?;
        let bank = self.bank(&base, &records, &block, &tok)?;
        let edit_records = by_language(&block, self.cfg.eval.edit_language);
        let (outcome, patch) = recycle_corrections(&base, &edit_records, &tok, &corrections, &self.cfg.edit, &bank, false)?;
        let mut report = RecycleReport {
            memit: Vec::new(),
            memat: Vec::new(),
        };
        for lang in Language::BOTH {
            let mut plain = evaluate(ModelRef::plain(&outcome.params), &block, &tok, lang)?;
            plain.metadata = self.report_meta("recycle_memit");
            let mut patched = evaluate(ModelRef::patched(&outcome.params, &patch), &block, &tok, lang)?;
            patched.metadata = self.report_meta("recycle_memat");
            report.memit.push(plain);
            report.memat.push(patched);
        }
        let dir = self.reports_dir();
        let rows = report
            .memit
            .iter()
            .map(|r| ("memit", r))
            .chain(report.memat.iter().map(|r| ("memat_recycled", r)));
        self.write(&dir.join("recycle.csv"), &reports_csv(rows))?;
        self.write(&dir.join("recycle.json"), &serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    /// Subject-overlap strata of block A, keyed by pair.
    pub fn strata(&self) -> Result<std::collections::BTreeMap<u64, f64>> {
        let (records, tok) = self.load_corpus()?;
        pair_subject_jaccard(&self.block_a(&records)?, &tok)
    }

    fn is_fresh(&self, stage: Stage) -> Result<bool> {
        let r = match stage {
            Stage::Gen => self.load_corpus().map(|_| ()),
            Stage::Pretrain => self.load_base().map(|_| ()),
            Stage::Edit => self.load_edited().map(|_| ()),
            Stage::Probe => self.load_probe().map(|_| ()),
            Stage::Optimize => self.load_corrections().map(|_| ()),
        };
        match r {
            Ok(()) => Ok(true),
            Err(Error::MissingArtifact { .. } | Error::ConfigMismatch { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Runs every stage up to and including `through` whose artifact is
    /// missing or was produced by a different configuration.
    pub fn prepare(&self, through: Stage) -> Result<()> {
        let stages = [Stage::Gen, Stage::Pretrain, Stage::Edit, Stage::Probe, Stage::Optimize];
        for &stage in stages.iter().take_while(|&&s| s != through).chain(std::iter::once(&through)) {
            if self.is_fresh(stage)? {
                continue;
            }
            info!("running stage {}", stage.command());
            match stage {
                Stage::Gen => self.gen().map(|_| ())?,
                Stage::Pretrain => self.pretrain().map(|_| ())?,
                Stage::Edit => self.edit().map(|_| ())?,
                Stage::Probe => self.probe().map(|_| ())?,
                Stage::Optimize => self.optimize().map(|_| ())?,
            }
        }
        Ok(())
    }

    /// gen, pretrain, edit, probe, optimize, then every evaluation.
    pub fn run_all(&self) -> Result<()> {
        self.gen()?;
        self.pretrain()?;
        self.edit()?;
        self.probe()?;
        self.optimize()?;
        for against in [Against::Baseline, Against::Memit, Against::Memat] {
            self.eval(against)?;
        }
        Ok(())
    }
}
