//! Synthetic bilingual counterfactual corpora.
//!
//! Two artificial languages share a pool of subject words. Relation
//! templates, objects, categories and filler words are disjoint between the
//! languages, the way translated sentences share names but not grammar.
//! Every pair is assigned a subject-overlap stratum: in the identical
//! stratum both languages use the same subject string, in the low stratum the
//! second language mutates the subject (suffixing or splitting words) so the
//! token-set Jaccard index drops to at most one half.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::jaccard::jaccard_index;
use crate::error::{Error, Result};

pub const N_PARAPHRASES: usize = 2;
pub const N_NEIGHBORS: usize = 10;
pub const SUBJECT_SLOT: &str = "{}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "L_A")]
    A,
    #[serde(rename = "L_B")]
    B,
}

impl Language {
    pub const BOTH: [Language; 2] = [Language::A, Language::B];

    pub fn other(self) -> Self {
        match self {
            Language::A => Language::B,
            Language::B => Language::A,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Language::A => "L_A",
            Language::B => "L_B",
        }
    }

    /// Template of the category prompt (`<subject> is a`).
    pub fn is_a_template(self) -> &'static str {
        match self {
            Language::A => "{} is a",
            Language::B => "{} es un",
        }
    }

    pub fn category_words(self) -> &'static [&'static str] {
        match self {
            Language::A => &["tavo", "mirel", "sunak", "pelo"],
            Language::B => &["tavu", "mirella", "sunaki", "pela"],
        }
    }

    /// Words used for paraphrase noise and filler text.
    pub fn filler_words(self) -> &'static [&'static str] {
        match self {
            Language::A => &[
                "the", "and", "then", "also", "here", "now", "well", "so", "very", "much", "often", "still",
                "again", "soon", "today", "maybe",
            ],
            Language::B => &[
                "la", "y", "luego", "tambe", "aqui", "ara", "be", "doncs", "molt", "gaire", "sovint", "encara",
                "altre", "aviat", "avui", "potser",
            ],
        }
    }

    /// Article words closing the second-language templates when gender
    /// duplication is on.
    /// Closes a false statement in the pretraining text.
    pub fn denial_word(self) -> &'static str {
        match self {
            Language::A => "not",
            Language::B => "non",
        }
    }

    pub fn gender_articles(self) -> [&'static str; 2] {
        match self {
            Language::A => ["he", "she"],
            Language::B => ["el", "ella"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L_A" | "A" | "a" => Ok(Language::A),
            "L_B" | "B" | "b" => Ok(Language::B),
            other => Err(Error::Input(format!("unknown language {other:?} (use L_A or L_B)"))),
        }
    }
}

impl std::fmt::Display for Language {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Fills the subject slot of `template`.
pub fn fill(template: &str, subject: &str) -> String {
    template.replacen(SUBJECT_SLOT, subject, 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodPrompt {
    pub prompt: String,
    pub subject: String,
}

/// One counterfactual triplet with its prompt bundle in one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub id: u64,
    pub pair_id: u64,
    pub language: Language,
    pub subject: String,
    pub relation_template: String,
    pub target_true: String,
    pub target_new: String,
    pub efficacy_prompt: String,
    pub paraphrase_prompts: Vec<String>,
    pub neighborhood_prompts: Vec<NeighborhoodPrompt>,
}

fn contains_word(text: &str, phrase: &str) -> bool {
    let words: Vec<&str> = text.split(' ').collect();
    let target: Vec<&str> = phrase.split(' ').collect();
    words.windows(target.len()).any(|w| w == target.as_slice())
}

impl FactRecord {
    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Input(format!("record {}: {msg}", self.id)));
        if self.paraphrase_prompts.len() != N_PARAPHRASES {
            return fail(format!("{} paraphrase prompts", self.paraphrase_prompts.len()));
        }
        if self.neighborhood_prompts.len() != N_NEIGHBORS {
            return fail(format!("{} neighborhood prompts", self.neighborhood_prompts.len()));
        }
        if self.target_true == self.target_new {
            return fail("true and new targets coincide".into());
        }
        if self.target_true.is_empty() || self.target_new.is_empty() {
            return fail("empty target".into());
        }
        if !self.relation_template.contains(SUBJECT_SLOT) {
            return fail("relation template has no subject slot".into());
        }
        let prompts = std::iter::once(&self.efficacy_prompt)
            .chain(&self.paraphrase_prompts)
            .chain(self.neighborhood_prompts.iter().map(|n| &n.prompt));
        for p in prompts {
            if contains_word(p, &self.target_true) || contains_word(p, &self.target_new) {
                return fail(format!("prompt {p:?} contains a target"));
            }
        }
        if !contains_word(&self.efficacy_prompt, &self.subject) {
            return fail("efficacy prompt does not contain the subject".into());
        }
        for n in &self.neighborhood_prompts {
            if n.subject == self.subject {
                return fail("neighborhood subject equals the record subject".into());
            }
        }
        Ok(())
    }
}

/// Target mix of subject-overlap strata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JaccardProfile {
    /// Probability of an identical subject (J = 1).
    pub identical: f64,
    /// Probability of a mutated subject (J <= 0.5).
    pub low: f64,
}

impl Default for JaccardProfile {
    fn default() -> Self {
        Self {
            identical: 0.5,
            low: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub jaccard_profile: JaccardProfile,
    pub n_relations: usize,
    pub objects_per_relation: usize,
    /// Words available for building two-word subjects.
    pub subject_words: usize,
    /// Relation words per template.
    pub relation_words: usize,
    /// Inclusive range of noise words prefixed to paraphrase prompts.
    pub noise_len: (usize, usize),
    pub duplication_on_gender: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            jaccard_profile: JaccardProfile::default(),
            n_relations: 4,
            objects_per_relation: 5,
            subject_words: 48,
            relation_words: 2,
            noise_len: (0, 8),
            duplication_on_gender: false,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.jaccard_profile;
        if p.identical < 0.0 || p.low < 0.0 || ((p.identical + p.low) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "jaccard profile probabilities must be non-negative and sum to 1, got {} + {}",
                p.identical, p.low
            )));
        }
        if self.n_relations == 0 || self.objects_per_relation < 2 {
            return Err(Error::Config("need >= 1 relation and >= 2 objects per relation".into()));
        }
        if self.relation_words == 0 {
            return Err(Error::Config("relation templates need at least one word".into()));
        }
        if self.noise_len.0 > self.noise_len.1 {
            return Err(Error::Config("noise_len range is empty".into()));
        }
        Ok(())
    }
}

/// Subject-overlap stratum of a record pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    /// J(s_A, s_B) = 1.
    Identical,
    /// J(s_A, s_B) <= 0.5.
    Low,
    /// Anything in between (never produced by the generator).
    Other,
}

impl Stratum {
    pub fn of(j: f64) -> Self {
        if j == 1.0 {
            Stratum::Identical
        } else if j <= 0.5 {
            Stratum::Low
        } else {
            Stratum::Other
        }
    }
}

/// Pseudo-word generator that never repeats a word.
struct WordForge {
    used: HashSet<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

impl WordForge {
    fn new() -> Self {
        let mut used = HashSet::new();
        for lang in Language::BOTH {
            used.extend(lang.filler_words().iter().map(|w| w.to_string()));
            used.extend(lang.category_words().iter().map(|w| w.to_string()));
            used.extend(lang.gender_articles().iter().map(|w| w.to_string()));
            used.insert(lang.denial_word().to_string());
            used.extend(lang.is_a_template().split(' ').map(|w| w.to_string()));
        }
        Self { used }
    }

    fn reserve(&mut self, w: &str) -> bool {
        self.used.insert(w.to_string())
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize, closed: bool) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if closed {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
            }
            if self.reserve(&w) {
                return w;
            }
        }
    }
}

struct RelationText {
    /// `[efficacy, paraphrase 1, paraphrase 2]` templates.
    templates: [String; 3],
    objects: Vec<String>,
}

fn make_relation(forge: &mut WordForge, rng: &mut ChaCha8Rng, cfg: &CorpusConfig, lang: Language) -> RelationText {
    let closed = lang == Language::B;
    let mut make_template = |subject_first: bool, rng: &mut ChaCha8Rng| {
        let words: Vec<String> = (0..cfg.relation_words).map(|_| forge.fresh(rng, 2, closed)).collect();
        if subject_first || words.len() < 2 {
            format!("{SUBJECT_SLOT} {}", words.join(" "))
        } else {
            format!("{} {SUBJECT_SLOT} {}", words[0], words[1..].join(" "))
        }
    };
    let templates = [
        make_template(true, rng),
        make_template(false, rng),
        make_template(true, rng),
    ];
    let objects = (0..cfg.objects_per_relation)
        .map(|_| forge.fresh(rng, 3, closed))
        .collect();
    RelationText { templates, objects }
}

/// Second-language variant of a subject with token-set Jaccard <= 0.5
/// against the original: one or both words are suffixed or split.
fn mutate_subject(forge: &mut WordForge, rng: &mut ChaCha8Rng, subject: &str) -> String {
    let words: Vec<&str> = subject.split(' ').collect();
    loop {
        let n_mut = rng.random_range(1..=words.len());
        let mut idx: Vec<usize> = (0..words.len()).collect();
        idx.shuffle(rng);
        let chosen: HashSet<usize> = idx.into_iter().take(n_mut).collect();
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if !chosen.contains(&i) {
                out.push(w.to_string());
                continue;
            }
            if rng.random_bool(0.5) && w.len() >= 4 {
                let mid = w.len() / 2;
                out.push(w[..mid].to_string());
                out.push(w[mid..].to_string());
            } else {
                let suffix = ["i", "a", "et", "ol"].choose(rng).unwrap();
                let v = format!("{w}{suffix}");
                forge.used.insert(v.clone());
                out.push(v);
            }
        }
        let candidate = out.join(" ");
        let a: Vec<&str> = words.clone();
        let b: Vec<&str> = candidate.split(' ').collect();
        if jaccard_index(&a, &b).map(|j| j <= 0.5).unwrap_or(false) {
            return candidate;
        }
    }
}

fn noise(rng: &mut ChaCha8Rng, lang: Language, range: (usize, usize)) -> Vec<&'static str> {
    let n = rng.random_range(range.0..=range.1);
    (0..n).map(|_| *lang.filler_words().choose(rng).unwrap()).collect()
}

fn with_noise(noise: &[&str], prompt: &str) -> String {
    if noise.is_empty() {
        prompt.to_string()
    } else {
        format!("{} {prompt}", noise.join(" "))
    }
}

/// Generates `n_pairs` bilingual record pairs (first language first, then the
/// second-language record or records sharing the same `pair_id`).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<FactRecord>> {
    cfg.validate()?;
    if cfg.n_pairs == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut forge = WordForge::new();

    let subject_pool: Vec<String> = (0..cfg.subject_words).map(|_| forge.fresh(&mut rng, 2, false)).collect();
    let n_groups = cfg.n_relations * cfg.objects_per_relation;
    let needed = cfg.n_pairs + n_groups * N_NEIGHBORS;
    let available = cfg.subject_words * cfg.subject_words.saturating_sub(1);
    if needed > available {
        return Err(Error::Generation(format!(
            "{needed} distinct subjects needed but {} subject words only give {available}",
            cfg.subject_words
        )));
    }
    let mut subjects = Vec::with_capacity(needed);
    let mut seen = HashSet::new();
    while subjects.len() < needed {
        let pick: Vec<&String> = subject_pool.choose_multiple(&mut rng, 2).collect();
        let s = format!("{} {}", pick[0], pick[1]);
        if seen.insert(s.clone()) {
            subjects.push(s);
        }
    }
    let (neighbor_subjects, record_subjects) = subjects.split_at(n_groups * N_NEIGHBORS);

    let relations: BTreeMap<Language, Vec<RelationText>> = Language::BOTH
        .iter()
        .map(|&lang| {
            let rels = (0..cfg.n_relations)
                .map(|_| make_relation(&mut forge, &mut rng, cfg, lang))
                .collect();
            (lang, rels)
        })
        .collect();

    let mut records = Vec::new();
    let mut next_id = 0u64;
    for (pair, subject_a) in record_subjects.iter().enumerate() {
        let rel = rng.random_range(0..cfg.n_relations);
        let true_obj = rng.random_range(0..cfg.objects_per_relation);
        let mut new_obj = rng.random_range(0..cfg.objects_per_relation - 1);
        if new_obj >= true_obj {
            new_obj += 1;
        }
        let identical = rng.random_bool(cfg.jaccard_profile.identical.clamp(0.0, 1.0));
        let subject_b = if identical {
            subject_a.clone()
        } else {
            mutate_subject(&mut forge, &mut rng, subject_a)
        };
        let group = rel * cfg.objects_per_relation + true_obj;
        let neighbors = &neighbor_subjects[group * N_NEIGHBORS..(group + 1) * N_NEIGHBORS];

        for lang in Language::BOTH {
            let text = &relations[&lang][rel];
            let subject = if lang == Language::A { subject_a } else { &subject_b };
            let variants: Vec<Option<&str>> = if lang == Language::B && cfg.duplication_on_gender {
                lang.gender_articles().iter().map(|a| Some(*a)).collect()
            } else {
                vec![None]
            };
            for article in variants {
                let close = |t: &str| match article {
                    Some(a) => format!("{t} {a}"),
                    None => t.to_string(),
                };
                let templates: Vec<String> = text.templates.iter().map(|t| close(t)).collect();
                let paraphrase_prompts = templates[1..]
                    .iter()
                    .map(|t| with_noise(&noise(&mut rng, lang, cfg.noise_len), &fill(t, subject)))
                    .collect();
                let neighborhood_prompts = neighbors
                    .iter()
                    .map(|s| NeighborhoodPrompt {
                        prompt: fill(&templates[0], s),
                        subject: s.clone(),
                    })
                    .collect();
                let record = FactRecord {
                    id: next_id,
                    pair_id: pair as u64,
                    language: lang,
                    subject: subject.clone(),
                    relation_template: templates[0].clone(),
                    target_true: text.objects[true_obj].clone(),
                    target_new: text.objects[new_obj].clone(),
                    efficacy_prompt: fill(&templates[0], subject),
                    paraphrase_prompts,
                    neighborhood_prompts,
                };
                record.validate()?;
                records.push(record);
                next_id += 1;
            }
        }
    }
    Ok(records)
}

/// Records of one language, in corpus order.
pub fn by_language(records: &[FactRecord], lang: Language) -> Vec<FactRecord> {
    records.iter().filter(|r| r.language == lang).cloned().collect()
}

/// Records whose `pair_id` is in `pairs`.
pub fn by_pairs(records: &[FactRecord], pairs: &HashSet<u64>) -> Vec<FactRecord> {
    records.iter().filter(|r| pairs.contains(&r.pair_id)).cloned().collect()
}

/// Distinct pair ids in first-appearance order.
pub fn pair_ids(records: &[FactRecord]) -> Vec<u64> {
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(r.pair_id)).map(|r| r.pair_id).collect()
}

pub fn save_records(records: &[FactRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<FactRecord>> {
    let records: Vec<FactRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_pairs: usize) -> CorpusConfig {
        CorpusConfig {
            n_pairs,
            seed: 11,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn zero_pairs_is_empty() {
        assert!(generate_corpus(&small(0)).unwrap().is_empty());
    }

    #[test]
    fn records_come_in_language_pairs() {
        let recs = generate_corpus(&small(30)).unwrap();
        assert_eq!(recs.len(), 60);
        for chunk in recs.chunks(2) {
            assert_eq!(chunk[0].pair_id, chunk[1].pair_id);
            assert_eq!(chunk[0].language, Language::A);
            assert_eq!(chunk[1].language, Language::B);
            assert_ne!(chunk[0].target_true, chunk[1].target_true);
        }
        for r in &recs {
            r.validate().unwrap();
        }
    }

    #[test]
    fn all_identical_profile_gives_j_one() {
        let cfg = CorpusConfig {
            jaccard_profile: JaccardProfile { identical: 1.0, low: 0.0 },
            ..small(40)
        };
        let recs = generate_corpus(&cfg).unwrap();
        for chunk in recs.chunks(2) {
            assert_eq!(chunk[0].subject, chunk[1].subject);
        }
    }

    #[test]
    fn gender_duplication_emits_two_second_language_variants() {
        let cfg = CorpusConfig {
            duplication_on_gender: true,
            ..small(5)
        };
        let recs = generate_corpus(&cfg).unwrap();
        assert_eq!(recs.len(), 15);
        let b: Vec<_> = recs.iter().filter(|r| r.pair_id == 0 && r.language == Language::B).collect();
        assert_eq!(b.len(), 2);
        assert_ne!(b[0].efficacy_prompt, b[1].efficacy_prompt);
        assert_eq!(b[0].target_new, b[1].target_new);
    }

    #[test]
    fn too_few_subject_words_is_a_generation_error() {
        let cfg = CorpusConfig {
            subject_words: 5,
            ..small(10)
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn bad_profile_is_rejected() {
        let cfg = CorpusConfig {
            jaccard_profile: JaccardProfile { identical: 0.7, low: 0.7 },
            ..small(10)
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(&small(20)).unwrap(), generate_corpus(&small(20)).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let recs = generate_corpus(&small(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        save_records(&recs, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), recs);
        let text = fs::read_to_string(&path).unwrap();
        let first = text.find("\"id\"").unwrap();
        let last = text.find("\"neighborhood_prompts\"").unwrap();
        assert!(first < last, "field order must follow the record layout");
    }
}
