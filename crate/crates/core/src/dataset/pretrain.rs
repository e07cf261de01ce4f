//! Teaching the toy model the true facts before any edit.
//!
//! Training text mixes fact sentences (every efficacy, paraphrase and
//! neighborhood prompt completed with its true object), category sentences
//! (`<subject> is a <category>`, the prompt family the head-correction KL
//! term anchors on), denials (a prompt completed with a wrong object of the
//! same relation and closed by the language's denial word, so the model has
//! a reason to track whether a completion is true) and filler word salad. Each training segment is
//! `<bos> s1 . s2 . s3` with one to three shuffled sentences, so the model
//! also sees facts after unrelated context, as during prefix averaging.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{fill, FactRecord, Language};
use super::tokenizer::{Tokenizer, SEP};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{forward_graph, score_continuations, Batch, BoundParams, Interventions, ModelParams, ModelRef};
use crate::model::round_to_f32;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Maximum optimizer steps.
    pub steps: usize,
    pub lr: f64,
    /// Segments per step.
    pub batch_size: usize,
    /// Maximum sentences packed into one segment.
    pub sentences_per_segment: usize,
    /// Share of filler sentences in the training text.
    pub filler_fraction: f64,
    /// Add one denial per efficacy and paraphrase prompt.
    pub denials: bool,
    /// Fraction of efficacy prompts that must greedily complete to the true
    /// object.
    pub recall_gate: f64,
    /// Steps between recall checks (0 disables early stopping).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 3e-4,
            batch_size: 16,
            sentences_per_segment: 3,
            filler_fraction: 0.3,
            denials: true,
            recall_gate: 0.9,
            eval_every: 250,
            seed: 0,
        }
    }
}

/// Tokenized prompt with the leading `<bos>`.
pub fn encode_prompt(tok: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![tok.bos()];
    ids.extend(tok.encode(text)?);
    Ok(ids)
}

/// Category index of a subject, stable across runs and platforms.
pub fn category_of(subject: &str, n_categories: usize) -> usize {
    let h = Sha256::digest(subject.as_bytes());
    (u64::from_le_bytes(h[..8].try_into().unwrap()) % n_categories as u64) as usize
}

/// `<subject> is a` in the record's language.
pub fn is_a_prompt(record: &FactRecord) -> String {
    fill(record.language.is_a_template(), &record.subject)
}

/// Every string the tokenizer must cover for this corpus.
pub fn corpus_texts(records: &[FactRecord]) -> Vec<String> {
    let mut texts = vec![SEP.to_string()];
    for lang in Language::BOTH {
        texts.push(lang.is_a_template().replace("{}", "").trim().to_string());
        texts.extend(lang.category_words().iter().map(|w| w.to_string()));
        texts.extend(lang.filler_words().iter().map(|w| w.to_string()));
        texts.extend(lang.gender_articles().iter().map(|w| w.to_string()));
        texts.push(lang.denial_word().to_string());
    }
    for r in records {
        texts.push(r.efficacy_prompt.clone());
        texts.push(r.target_true.clone());
        texts.push(r.target_new.clone());
        texts.extend(r.paraphrase_prompts.iter().cloned());
        texts.extend(r.neighborhood_prompts.iter().map(|n| n.prompt.clone()));
    }
    texts
}

pub fn corpus_tokenizer(records: &[FactRecord]) -> Tokenizer {
    let texts = corpus_texts(records);
    Tokenizer::train(texts.iter().map(|s| s.as_str()))
}

/// Tokenized training sentences (without `<bos>`).
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub sentences: Vec<Vec<usize>>,
    pub n_facts: usize,
    pub n_categories: usize,
    pub n_denials: usize,
    pub n_filler: usize,
}

impl PretrainData {
    /// Training sentences for `records`, using the text-mix fields of `cfg`.
    pub fn build(records: &[FactRecord], tok: &Tokenizer, cfg: &PretrainConfig) -> Result<Self> {
        let filler_fraction = cfg.filler_fraction;
        if !(0.0..1.0).contains(&filler_fraction) {
            return Err(Error::Config(format!("filler_fraction must be in [0, 1), got {filler_fraction}")));
        }
        let mut facts = BTreeSet::new();
        let mut categories = BTreeSet::new();
        // Category facts are shared across languages: index by the first-language subject of the pair.
        let mut anchor = std::collections::BTreeMap::new();
        for r in records.iter().filter(|r| r.language == Language::A) {
            anchor.entry(r.pair_id).or_insert_with(|| r.subject.clone());
        }
        for r in records {
            facts.insert(format!("{} {}", r.efficacy_prompt, r.target_true));
            for p in &r.paraphrase_prompts {
                facts.insert(format!("{p} {}", r.target_true));
            }
            let cats = r.language.category_words();
            let key = anchor.get(&r.pair_id).unwrap_or(&r.subject);
            categories.insert(format!("{} {}", is_a_prompt(r), cats[category_of(key, cats.len())]));
            for n in &r.neighborhood_prompts {
                facts.insert(format!("{} {}", n.prompt, r.target_true));
                categories.insert(format!(
                    "{} {}",
                    fill(r.language.is_a_template(), &n.subject),
                    cats[category_of(&n.subject, cats.len())]
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut denials = BTreeSet::new();
        // A denied prompt's true completion is seen twice so it stays the
        // clear argmax.
        let mut repeated = BTreeSet::new();
        if cfg.denials {
            let mut objects: std::collections::BTreeMap<(Language, &str), BTreeSet<&str>> = Default::default();
            for r in records {
                let set = objects.entry((r.language, r.relation_template.as_str())).or_default();
                set.insert(&r.target_true);
                set.insert(&r.target_new);
            }
            for r in records {
                let wrong: Vec<&str> = objects[&(r.language, r.relation_template.as_str())]
                    .iter()
                    .copied()
                    .filter(|&o| o != r.target_true && o != r.target_new)
                    .collect();
                for p in std::iter::once(&r.efficacy_prompt).chain(&r.paraphrase_prompts) {
                    if let Some(o) = wrong.choose(&mut rng) {
                        denials.insert(format!("{p} {o} {}", r.language.denial_word()));
                        repeated.insert(format!("{p} {}", r.target_true));
                    }
                }
            }
        }
        let structured = facts.len() + repeated.len() + categories.len() + denials.len();
        let n_filler = ((structured as f64) * filler_fraction / (1.0 - filler_fraction)).round() as usize;
        let mut sentences = Vec::with_capacity(structured + n_filler);
        for s in facts.iter().chain(&repeated).chain(&categories).chain(&denials) {
            sentences.push(tok.encode(s)?);
        }
        for i in 0..n_filler {
            let lang = if i % 2 == 0 { Language::A } else { Language::B };
            let n = rng.random_range(3..=8);
            let words: Vec<&str> = (0..n).map(|_| *lang.filler_words().choose(&mut rng).unwrap()).collect();
            sentences.push(tok.encode(&words.join(" "))?);
        }
        Ok(Self {
            sentences,
            n_facts: facts.len(),
            n_categories: categories.len(),
            n_denials: denials.len(),
            n_filler,
        })
    }

    /// One epoch of packed segments in shuffled order.
    fn segments(&self, tok: &Tokenizer, max_len: usize, per_segment: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.sentences.len()).collect();
        order.shuffle(rng);
        let mut out = Vec::new();
        let mut it = order.into_iter().peekable();
        while let Some(first) = it.next() {
            let mut seg = vec![tok.bos()];
            seg.extend(&self.sentences[first]);
            seg.truncate(max_len);
            let want = rng.random_range(1..=per_segment.max(1));
            for _ in 1..want {
                match it.peek() {
                    Some(&next) if seg.len() + 1 + self.sentences[next].len() <= max_len => {
                        seg.push(tok.sep());
                        seg.extend(&self.sentences[next]);
                        it.next();
                    }
                    _ => break,
                }
            }
            out.push(seg);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub recall: f64,
    pub gate_passed: bool,
    /// `(step, mean loss since previous entry)`.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Mean next-token cross entropy of `segments` and its gradient for every
/// weight tensor, in named order.
fn loss_and_grads(params: &ModelParams, segments: &[Vec<usize>]) -> Result<(f64, Vec<ndarray::Array2<f64>>)> {
    let config = &params.config;
    let batch = Batch::new(segments, config)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(params, &mut g, true);
    let fw = forward_graph(&mut g, config, &bound, &batch, &Interventions::default());
    let mut picks = Vec::new();
    for seg in &batch.segments {
        for row in seg.start..seg.end - 1 {
            picks.push((row, batch.tokens[row + 1]));
        }
    }
    if picks.is_empty() {
        return Err(Error::Training("batch has no next-token targets".into()));
    }
    let total = g.pick_sum(fw.log_probs, &picks);
    let loss = g.scale(total, -1.0 / picks.len() as f64);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss)?;
    let vars = bound.vars();
    let shapes: Vec<_> = params.named_tensors().into_iter().map(|(_, t)| t.dim()).collect();
    let out = vars
        .into_iter()
        .zip(shapes)
        .map(|(v, s)| grads.take(v).unwrap_or_else(|| ndarray::Array2::zeros(s)))
        .collect();
    Ok((value, out))
}

/// Fraction of records whose efficacy prompt greedily completes to the true
/// object.
pub fn fact_recall(params: &ModelParams, records: &[FactRecord], tok: &Tokenizer) -> Result<f64> {
    if records.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0;
    for chunk in records.chunks(64) {
        let pairs = chunk
            .iter()
            .map(|r| Ok((encode_prompt(tok, &r.efficacy_prompt)?, tok.encode(&r.target_true)?)))
            .collect::<Result<Vec<_>>>()?;
        hits += score_continuations(ModelRef::plain(params), &pairs)?
            .iter()
            .filter(|s| s.greedy_match)
            .count();
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Trains `params` on the corpus text until the recall gate passes or the
/// step budget runs out.
pub fn pretrain(
    params: &mut ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.steps == 0 {
        let recall = fact_recall(params, records, tok)?;
        return Ok(PretrainReport {
            steps: 0,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            recall,
            gate_passed: recall >= cfg.recall_gate,
            loss_curve: Vec::new(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let data = PretrainData::build(records, tok, cfg)?;
    info!(
        "pretraining on {} fact, {} category, {} denial and {} filler sentences",
        data.n_facts, data.n_categories, data.n_denials, data.n_filler
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let shapes: Vec<_> = params.named_tensors().into_iter().map(|(_, t)| t.dim()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, shapes);
    let max_len = params.config.max_seq_len;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let (mut initial_loss, mut final_loss) = (f64::NAN, f64::NAN);
    let (mut window, mut window_n) = (0.0, 0usize);
    let mut curve = Vec::new();
    let mut recall = f64::NAN;
    let mut step = 0;
    while step < cfg.steps {
        if queue.len() < cfg.batch_size {
            let mut fresh = data.segments(tok, max_len, cfg.sentences_per_segment, &mut rng);
            fresh.reverse();
            queue.splice(0..0, fresh);
        }
        let batch: Vec<Vec<usize>> = (0..cfg.batch_size).filter_map(|_| queue.pop()).collect();
        let (loss, grads) = loss_and_grads(params, &batch)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        if step == 0 {
            initial_loss = loss;
        }
        final_loss = loss;
        window += loss;
        window_n += 1;
        adam.step(params.tensors_mut(), &grads);
        for t in params.tensors_mut() {
            round_to_f32(t);
        }
        step += 1;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            curve.push((step, window / window_n as f64));
            (window, window_n) = (0.0, 0);
            recall = fact_recall(params, records, tok)?;
            debug!("step {step}: loss {:.4}, recall {recall:.3}", curve.last().unwrap().1);
            if recall >= cfg.recall_gate {
                break;
            }
        }
    }
    if window_n > 0 {
        curve.push((step, window / window_n as f64));
    }
    params.check_finite().map_err(|e| Error::Training(format!("after {step} steps: {e}")))?;
    if !(cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        recall = fact_recall(params, records, tok)?;
    }
    info!("pretraining stopped after {step} steps: loss {initial_loss:.3} -> {final_loss:.3}, recall {recall:.3}");
    Ok(PretrainReport {
        steps: step,
        initial_loss,
        final_loss,
        recall,
        gate_passed: recall >= cfg.recall_gate,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, CorpusConfig};
    use crate::model::ModelConfig;

    fn setup(n_pairs: usize) -> (Vec<FactRecord>, Tokenizer, ModelParams) {
        let recs = generate_corpus(&CorpusConfig {
            n_pairs,
            seed: 2,
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
        (recs, tok, ModelParams::init(&cfg).unwrap())
    }

    #[test]
    fn zero_steps_leaves_params_unchanged() {
        let (recs, tok, mut p) = setup(4);
        let before = p.clone();
        let report = pretrain(&mut p, &recs, &tok, &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(p, before);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn loss_decreases() {
        let (recs, tok, mut p) = setup(25);
        let cfg = PretrainConfig {
            steps: 40,
            lr: 3e-3,
            eval_every: 0,
            ..Default::default()
        };
        let report = pretrain(&mut p, &recs, &tok, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
    }

    #[test]
    fn every_corpus_string_encodes_and_targets_need_no_fallback() {
        let (recs, tok, _) = setup(30);
        for r in &recs {
            assert!(!tok.uses_fallback(&r.target_true));
            assert!(!tok.uses_fallback(&r.target_new));
            let ids = tok.encode(&r.efficacy_prompt).unwrap();
            assert_eq!(tok.decode(&ids).unwrap(), r.efficacy_prompt);
        }
    }

    #[test]
    fn filler_share_matches_request() {
        let (recs, tok, _) = setup(20);
        let data = PretrainData::build(&recs, &tok, &PretrainConfig::default()).unwrap();
        let share = data.n_filler as f64 / data.sentences.len() as f64;
        assert!((share - 0.3).abs() < 0.01, "{share}");
    }

    #[test]
    fn denials_never_use_either_object_of_their_record() {
        let (recs, tok, _) = setup(20);
        let data = PretrainData::build(&recs, &tok, &PretrainConfig::default()).unwrap();
        assert!(data.n_denials > 0);
        let without = PretrainData::build(&recs, &tok, &PretrainConfig { denials: false, ..Default::default() }).unwrap();
        assert_eq!(without.n_denials, 0);
        for r in &recs {
            let deny = tok.encode(r.language.denial_word()).unwrap()[0];
            let prompt = tok.encode(&r.efficacy_prompt).unwrap();
            let objects = [tok.encode(&r.target_true).unwrap(), tok.encode(&r.target_new).unwrap()];
            for s in data.sentences.iter().filter(|s| s.last() == Some(&deny) && s.starts_with(&prompt)) {
                let obj = &s[prompt.len()..s.len() - 1];
                assert!(objects.iter().all(|o| o.as_slice() != obj));
            }
        }
    }
}
