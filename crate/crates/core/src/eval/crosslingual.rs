//! Edit in one language, evaluate in both, split by subject overlap.

use log::warn;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics, MetricsReport};
use crate::dataset::{pair_subject_jaccard, FactRecord, Language, Stratum, Tokenizer};
use crate::error::{Error, Result};
use crate::model::ModelRef;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualCell {
    pub edit_language: Language,
    pub eval_language: Language,
    pub stratum: Stratum,
    pub n_records: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualMatrix {
    pub cells: Vec<CrossLingualCell>,
}

/// Same-language minus cross-language value of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drop {
    pub es: f64,
    pub em: f64,
}

impl CrossLingualMatrix {
    pub fn get(&self, edit: Language, eval: Language, stratum: Stratum) -> Option<&CrossLingualCell> {
        self.cells
            .iter()
            .find(|c| c.edit_language == edit && c.eval_language == eval && c.stratum == stratum)
    }

    /// ES and EM lost when moving from the edit language to the other one,
    /// within `stratum`.
    pub fn drop(&self, edit: Language, stratum: Stratum) -> Option<Drop> {
        let same = self.get(edit, edit, stratum)?;
        let cross = self.get(edit, edit.other(), stratum)?;
        Some(Drop {
            es: same.metrics.es.value - cross.metrics.es.value,
            em: same.metrics.em.value - cross.metrics.em.value,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("edit_language,eval_language,stratum,n,ES,PS,NS,EM,PM,NM,EA,PA,NA\n");
        for c in &self.cells {
            let vals: Vec<String> = c.metrics.as_array().iter().map(|m| format!("{:.4}", m.value)).collect();
            out.push_str(&format!(
                "{},{},{:?},{},{}\n",
                c.edit_language,
                c.eval_language,
                c.stratum,
                c.n_records,
                vals.join(",")
            ));
        }
        out
    }
}

/// One cell per (edit language, eval language, stratum) for every edited
/// model in `edited`, each evaluated on its facts in both languages.
///
/// `records` holds both languages of the edited pairs; strata come from the
/// subject Jaccard index of each pair. Empty strata are skipped.
pub fn crosslingual_matrix(
    edited: &[(Language, ModelRef<'_>)],
    records: &[FactRecord],
    tok: &Tokenizer,
) -> Result<CrossLingualMatrix> {
    if records.is_empty() {
        return Err(Error::Input("no records for the cross-lingual matrix".into()));
    }
    let strata = pair_subject_jaccard(records, tok)?;
    let mut cells = Vec::new();
    for &(edit_language, model) in edited {
        for eval_language in Language::BOTH {
            let report = evaluate(model, records, tok, eval_language)?;
            for stratum in [Stratum::Identical, Stratum::Low] {
                let rows: Vec<_> = report
                    .records
                    .iter()
                    .filter(|r| strata.get(&r.pair_id).map(|&j| Stratum::of(j)) == Some(stratum))
                    .cloned()
                    .collect();
                if rows.is_empty() {
                    warn!("stratum {stratum:?} is empty for {edit_language} -> {eval_language}; skipped");
                    continue;
                }
                cells.push(CrossLingualCell {
                    edit_language,
                    eval_language,
                    stratum,
                    n_records: rows.len(),
                    metrics: Metrics::from_records(&rows)?,
                });
            }
        }
    }
    Ok(CrossLingualMatrix { cells })
}

/// Report restricted to the records of `report` whose pairs fall in
/// `stratum`.
pub fn stratum_report(
    report: &MetricsReport,
    strata: &std::collections::BTreeMap<u64, f64>,
    stratum: Stratum,
) -> Result<MetricsReport> {
    let records: Vec<_> = report
        .records
        .iter()
        .filter(|r| strata.get(&r.pair_id).map(|&j| Stratum::of(j)) == Some(stratum))
        .cloned()
        .collect();
    Ok(MetricsReport {
        language: report.language,
        n_records: records.len(),
        metrics: Metrics::from_records(&records)?,
        records,
        metadata: report.metadata.clone(),
    })
}
