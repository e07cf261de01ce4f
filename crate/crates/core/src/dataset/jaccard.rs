//! Token-set overlap between cross-lingual counterparts.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::corpus::{FactRecord, Language, SUBJECT_SLOT};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

/// `|A ∩ B| / |A ∪ B|` over unique elements.
pub fn jaccard_index<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let a: HashSet<&T> = a.iter().collect();
    let b: HashSet<&T> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return Err(Error::Input("Jaccard index of two empty sets is undefined".into()));
    }
    Ok(a.intersection(&b).count() as f64 / union as f64)
}

pub const N_BINS: usize = 10;

/// Equal-width histogram over [0, 1]; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64]) -> Self {
        let edges = (0..=N_BINS).map(|i| i as f64 / N_BINS as f64).collect();
        let mut counts = vec![0; N_BINS];
        for &v in values {
            let bin = ((v * N_BINS as f64).floor() as usize).min(N_BINS - 1);
            counts[bin] += 1;
        }
        Self { edges, counts }
    }
}

/// Subject, relation and target overlap of every matched pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_pairs: usize,
    pub subjects: Histogram,
    pub relations: Histogram,
    pub targets: Histogram,
    /// Per-pair subject Jaccard index, keyed by `pair_id`.
    pub subject_jaccard: BTreeMap<u64, f64>,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,subjects,relations,targets\n");
        for i in 0..N_BINS {
            out.push_str(&format!(
                "{:.1},{:.1},{},{},{}\n",
                self.subjects.edges[i],
                self.subjects.edges[i + 1],
                self.subjects.counts[i],
                self.relations.counts[i],
                self.targets.counts[i]
            ));
        }
        out
    }
}

fn tokens(tok: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    tok.encode(text)
}

fn relation_tokens(tok: &Tokenizer, template: &str) -> Result<Vec<usize>> {
    let words: Vec<&str> = template.split(' ').filter(|w| *w != SUBJECT_SLOT).collect();
    tok.encode(&words.join(" "))
}

/// First record of each language per pair (gender variants share tokens
/// apart from the closing article, so one representative suffices).
pub fn matched_pairs(records: &[FactRecord]) -> Vec<(&FactRecord, &FactRecord)> {
    let mut first: BTreeMap<(u64, Language), &FactRecord> = BTreeMap::new();
    for r in records {
        first.entry((r.pair_id, r.language)).or_insert(r);
    }
    let mut pairs = Vec::new();
    for (&(pair, lang), &a) in &first {
        if lang == Language::A {
            if let Some(&b) = first.get(&(pair, Language::B)) {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Subject Jaccard index of every matched pair, keyed by `pair_id`.
pub fn pair_subject_jaccard(records: &[FactRecord], tok: &Tokenizer) -> Result<BTreeMap<u64, f64>> {
    matched_pairs(records)
        .into_iter()
        .map(|(a, b)| Ok((a.pair_id, jaccard_index(&tokens(tok, &a.subject)?, &tokens(tok, &b.subject)?)?)))
        .collect()
}

pub fn similarity_histogram(records: &[FactRecord], tok: &Tokenizer) -> Result<SimilarityReport> {
    let pairs = matched_pairs(records);
    if pairs.is_empty() {
        return Err(Error::Input("no matched cross-lingual pairs".into()));
    }
    let (mut subj, mut rel, mut tgt) = (Vec::new(), Vec::new(), Vec::new());
    let mut subject_jaccard = BTreeMap::new();
    for (a, b) in &pairs {
        let j = jaccard_index(&tokens(tok, &a.subject)?, &tokens(tok, &b.subject)?)?;
        subject_jaccard.insert(a.pair_id, j);
        subj.push(j);
        rel.push(jaccard_index(
            &relation_tokens(tok, &a.relation_template)?,
            &relation_tokens(tok, &b.relation_template)?,
        )?);
        let targets = |r: &FactRecord| -> Result<Vec<usize>> {
            let mut t = tokens(tok, &r.target_true)?;
            t.extend(tokens(tok, &r.target_new)?);
            Ok(t)
        };
        tgt.push(jaccard_index(&targets(a)?, &targets(b)?)?);
    }
    Ok(SimilarityReport {
        n_pairs: pairs.len(),
        subjects: Histogram::of(&subj),
        relations: Histogram::of(&rel),
        targets: Histogram::of(&tgt),
        subject_jaccard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_values() {
        assert_eq!(jaccard_index(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(jaccard_index(&[1], &[2]).unwrap(), 0.0);
        assert!((jaccard_index(&["t1", "t2"], &["t2", "t3"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(jaccard_index::<u8>(&[], &[]).is_err());
        assert_eq!(jaccard_index(&[], &[1]).unwrap(), 0.0);
    }

    #[test]
    fn histogram_edges_and_closed_last_bin() {
        let h = Histogram::of(&[1.0, 0.0]);
        assert_eq!(h.edges.len(), N_BINS + 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[N_BINS - 1], 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 2);
    }

    proptest! {
        #[test]
        fn jaccard_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..10, 0..8), b in proptest::collection::vec(0u8..10, 1..8)) {
            let j = jaccard_index(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j, jaccard_index(&b, &a).unwrap());
        }
    }
}
