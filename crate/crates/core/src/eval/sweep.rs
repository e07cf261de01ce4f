//! MEMAT runs over several head counts, against the MEMIT-only model.

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, reports_csv, MetricsReport};
use crate::dataset::{FactRecord, Language, Tokenizer};
use crate::error::Result;
use crate::memat::{optimize_corrections, MematConfig};
use crate::model::{ModelParams, ModelRef};
use crate::probe::{select_top_k, AccuracyMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweep {
    pub language: Language,
    pub baseline: MetricsReport,
    /// `(K, report)` in the requested order. `K = 0` fits nothing and is the
    /// baseline itself.
    pub runs: Vec<(usize, MetricsReport)>,
}

impl KSweep {
    pub fn to_csv(&self) -> String {
        let labels: Vec<String> = self.runs.iter().map(|(k, _)| format!("K={k}")).collect();
        reports_csv(
            std::iter::once(("memit", &self.baseline))
                .chain(labels.iter().map(String::as_str).zip(self.runs.iter().map(|(_, r)| r))),
        )
    }
}

/// For each `K`, fits corrections at the top-`K` heads of `accuracy` on
/// `records` of the edited model and evaluates them in `language`.
pub fn k_sweep(
    edited: &ModelParams,
    records: &[FactRecord],
    tok: &Tokenizer,
    accuracy: &AccuracyMap,
    ks: &[usize],
    cfg: &MematConfig,
    language: Language,
) -> Result<KSweep> {
    let baseline = evaluate(ModelRef::plain(edited), records, tok, language)?;
    let mut runs = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            runs.push((0, baseline.clone()));
            continue;
        }
        let psi = select_top_k(accuracy, k)?;
        let set = optimize_corrections(edited, records, tok, &psi, &MematConfig { k, ..cfg.clone() })?;
        let patch = set.to_patch();
        let report = evaluate(ModelRef::patched(edited, &patch), records, tok, language)?;
        info!("K={k}: {}", report.summary());
        runs.push((k, report));
    }
    Ok(KSweep {
        language,
        baseline,
        runs,
    })
}
