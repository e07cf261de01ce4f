//! Success, magnitude and accuracy metrics over efficacy, paraphrase and
//! neighborhood prompts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{encode_prompt, FactRecord, Language, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{score_continuations, ModelRef};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Scores of both objects after one prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub logp_new: f64,
    pub logp_true: f64,
    /// Greedy decoding reproduces the new object.
    pub top_new: bool,
    /// Greedy decoding reproduces the true object.
    pub top_true: bool,
}

impl PromptScore {
    pub fn prefers_new(&self) -> bool {
        self.logp_new > self.logp_true
    }

    pub fn prefers_true(&self) -> bool {
        self.logp_true > self.logp_new
    }

    /// `P(o*) - P(o^c)`.
    pub fn gap(&self) -> f64 {
        self.logp_new.exp() - self.logp_true.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub record_id: u64,
    pub pair_id: u64,
    pub efficacy: PromptScore,
    pub paraphrases: Vec<PromptScore>,
    pub neighbors: Vec<PromptScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl RecordScores {
    /// Per-record values of the nine metrics in `[ES, PS, NS, EM, PM, NM,
    /// EA, PA, NA]` order, as fractions.
    pub fn values(&self) -> [f64; 9] {
        let e = &self.efficacy;
        let pp = &self.paraphrases;
        let np = &self.neighbors;
        [
            ind(e.prefers_new()),
            mean(pp.iter().map(|s| ind(s.prefers_new()))),
            mean(np.iter().map(|s| ind(s.prefers_true()))),
            e.gap(),
            mean(pp.iter().map(PromptScore::gap)),
            mean(np.iter().map(|s| -s.gap())),
            ind(e.top_new),
            mean(pp.iter().map(|s| ind(s.top_new))),
            mean(np.iter().map(|s| ind(s.top_true))),
        ]
    }
}

/// Point estimate and 95% half-width, both in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub ci: f64,
}

impl Metric {
    /// Mean of `xs` and the normal-approximation half-width
    /// `1.96 * sd / sqrt(n)` (population sd), scaled to percent.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        Self {
            value: m * 100.0,
            ci: Z95 * var.sqrt() / n.sqrt() * 100.0,
        }
    }
}

pub const METRIC_NAMES: [&str; 9] = ["ES", "PS", "NS", "EM", "PM", "NM", "EA", "PA", "NA"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct Metrics {
    pub es: Metric,
    pub ps: Metric,
    pub ns: Metric,
    pub em: Metric,
    pub pm: Metric,
    pub nm: Metric,
    pub ea: Metric,
    pub pa: Metric,
    pub na: Metric,
}

impl Metrics {
    pub fn from_records(records: &[RecordScores]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("cannot compute metrics over zero records".into()));
        }
        let per: Vec<[f64; 9]> = records.iter().map(RecordScores::values).collect();
        let col = |j: usize| Metric::of(&per.iter().map(|v| v[j]).collect::<Vec<_>>());
        Ok(Self {
            es: col(0),
            ps: col(1),
            ns: col(2),
            em: col(3),
            pm: col(4),
            nm: col(5),
            ea: col(6),
            pa: col(7),
            na: col(8),
        })
    }

    pub fn as_array(&self) -> [Metric; 9] {
        [self.es, self.ps, self.ns, self.em, self.pm, self.nm, self.ea, self.pa, self.na]
    }

    /// Harmonic mean of ES, PS and NS (0 if any is 0).
    pub fn harmonic_success(&self) -> f64 {
        let v = [self.es.value, self.ps.value, self.ns.value];
        if v.iter().any(|&x| x <= 0.0) {
            return 0.0;
        }
        3.0 / v.iter().map(|x| 1.0 / x).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub language: Language,
    pub n_records: usize,
    pub metrics: Metrics,
    pub records: Vec<RecordScores>,
    #[serde(default)]
    pub metadata: Value,
}

impl MetricsReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["label".to_string(), "language".into(), "n".into()];
        for m in METRIC_NAMES {
            cols.push(m.to_string());
            cols.push(format!("{m}_ci"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut cols = vec![label.to_string(), self.language.to_string(), self.n_records.to_string()];
        for m in self.metrics.as_array() {
            cols.push(format!("{:.4}", m.value));
            cols.push(format!("{:.4}", m.ci));
        }
        cols.join(",")
    }

    pub fn summary(&self) -> String {
        let parts: Vec<String> = METRIC_NAMES
            .iter()
            .zip(self.metrics.as_array())
            .map(|(n, m)| format!("{n} {:.1} ({:.1})", m.value, m.ci))
            .collect();
        format!("{} n={}: {}", self.language, self.n_records, parts.join(", "))
    }
}

/// CSV table of labeled reports.
pub fn reports_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> String {
    let mut out = MetricsReport::csv_header();
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&r.csv_row(label));
        out.push('\n');
    }
    out
}

/// Scores one record: 13 prompts x 2 objects in a single packed pass.
pub fn score_record(model: ModelRef<'_>, record: &FactRecord, tok: &Tokenizer) -> Result<RecordScores> {
    let new = tok.encode(&record.target_new)?;
    let true_ = tok.encode(&record.target_true)?;
    let prompts: Vec<Vec<usize>> = std::iter::once(&record.efficacy_prompt)
        .chain(&record.paraphrase_prompts)
        .chain(record.neighborhood_prompts.iter().map(|n| &n.prompt))
        .map(|p| encode_prompt(tok, p))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&[usize], &[usize])> = prompts
        .iter()
        .flat_map(|p| [(p.as_slice(), new.as_slice()), (p.as_slice(), true_.as_slice())])
        .collect();
    let scores = score_continuations(model, &pairs)?;
    let mut prompt_scores = scores.chunks(2).map(|c| PromptScore {
        logp_new: c[0].logprob,
        logp_true: c[1].logprob,
        top_new: c[0].greedy_match,
        top_true: c[1].greedy_match,
    });
    let efficacy = prompt_scores.next().expect("efficacy prompt scored");
    let paraphrases = prompt_scores.by_ref().take(record.paraphrase_prompts.len()).collect();
    let neighbors = prompt_scores.collect();
    Ok(RecordScores {
        record_id: record.id,
        pair_id: record.pair_id,
        efficacy,
        paraphrases,
        neighbors,
    })
}

/// Metrics of `model` over the records of `language`.
pub fn evaluate(model: ModelRef<'_>, records: &[FactRecord], tok: &Tokenizer, language: Language) -> Result<MetricsReport> {
    let selected: Vec<&FactRecord> = records.iter().filter(|r| r.language == language).collect();
    if selected.is_empty() {
        return Err(Error::Input(format!("no {language} records to evaluate")));
    }
    let scores = selected
        .par_iter()
        .map(|r| score_record(model, r, tok))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        language,
        n_records: scores.len(),
        metrics: Metrics::from_records(&scores)?,
        records: scores,
        metadata: Value::Null,
    })
}
