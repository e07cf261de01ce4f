//! Edit-set size sweeps on a log scale, with and without recycled
//! corrections.

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport};
use crate::dataset::{FactRecord, Language, Tokenizer};
use crate::error::{Error, Result};
use crate::memat::{recycle_corrections, HeadCorrectionSet};
use crate::memit::{EditConfig, KeyBank};
use crate::model::{ModelParams, ModelRef};

/// Largest edit-set size of the schedule, reached at [`ScalingSchedule::LAST`].
pub const MAX_EDITS: f64 = 10_000.0;

/// `n_i = round(exp(ln(10000) * i / 16))` for the chosen indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSchedule {
    pub indices: Vec<usize>,
}

impl ScalingSchedule {
    pub const LAST: usize = 16;

    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("schedule indices {indices:?} must be strictly increasing")));
        }
        Ok(Self { indices })
    }

    pub fn full() -> Self {
        Self {
            indices: (0..=Self::LAST).collect(),
        }
    }

    pub fn n(i: usize) -> usize {
        (MAX_EDITS.ln() * i as f64 / Self::LAST as f64).exp().round() as usize
    }

    pub fn counts(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| Self::n(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub index: usize,
    pub n: usize,
    pub memit: MetricsReport,
    pub memat: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurves {
    pub language: Language,
    pub points: Vec<ScalingPoint>,
}

impl ScalingCurves {
    /// Long-format curve data: one row per (n, method, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,n,log10_n,method,metric,value,ci\n");
        for p in &self.points {
            for (method, r) in [("memit", &p.memit), ("memat", &p.memat)] {
                for (name, m) in super::METRIC_NAMES.iter().zip(r.metrics.as_array()) {
                    out.push_str(&format!(
                        "{},{},{:.4},{method},{name},{:.4},{:.4}\n",
                        p.index,
                        p.n,
                        (p.n as f64).log10(),
                        m.value,
                        m.ci
                    ));
                }
            }
        }
        out
    }
}

/// For every schedule size `n`, edits the first `n` records of `pool` into
/// a fresh copy of `base` and evaluates it with and without the recycled
/// `corrections`. `bank_for` builds the preexisting-key statistics for each
/// edit set. Records the corrections were fit on must not be in `pool`.
pub fn scaling_curves<F>(
    base: &ModelParams,
    pool: &[FactRecord],
    tok: &Tokenizer,
    schedule: &ScalingSchedule,
    corrections: &HeadCorrectionSet,
    edit_cfg: &EditConfig,
    mut bank_for: F,
) -> Result<ScalingCurves>
where
    F: FnMut(&[FactRecord]) -> Result<KeyBank>,
{
    let language = pool
        .first()
        .map(|r| r.language)
        .ok_or_else(|| Error::Input("empty record pool".into()))?;
    if pool.iter().any(|r| r.language != language) {
        return Err(Error::Input("the scaling pool must hold a single language".into()));
    }
    if let Some(&n) = schedule.counts().iter().find(|&&n| n > pool.len()) {
        return Err(Error::Input(format!("schedule needs {n} records but the pool has {}", pool.len())));
    }
    let mut points = Vec::with_capacity(schedule.indices.len());
    for &index in &schedule.indices {
        let n = ScalingSchedule::n(index);
        let block = &pool[..n];
        let bank = bank_for(block)?;
        let (outcome, patch) = recycle_corrections(base, block, tok, corrections, edit_cfg, &bank, false)?;
        let memit = evaluate(ModelRef::plain(&outcome.params), block, tok, language)?;
        let memat = evaluate(ModelRef::patched(&outcome.params, &patch), block, tok, language)?;
        info!("n={n}: EM memit {:.1} memat {:.1}", memit.metrics.em.value, memat.metrics.em.value);
        points.push(ScalingPoint { index, n, memit, memat });
    }
    Ok(ScalingCurves { language, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        assert_eq!(ScalingSchedule::n(16), 10_000);
        assert_eq!(ScalingSchedule::n(8), 100);
        assert_eq!(ScalingSchedule::n(0), 1);
        assert_eq!(ScalingSchedule::n(4), 10);
    }

    #[test]
    fn full_schedule_is_increasing() {
        let c = ScalingSchedule::full().counts();
        assert_eq!(c.len(), 17);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unordered_indices_are_rejected() {
        assert!(ScalingSchedule::new(vec![3, 2]).is_err());
        assert!(ScalingSchedule::new(vec![2, 2]).is_err());
    }
}
