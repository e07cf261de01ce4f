//! Properties that must hold for any model, record set or score table.

mod common;

use std::sync::OnceLock;

use proptest::prelude::*;

use memat::dataset::{by_language, corpus_tokenizer, FactRecord, Language, Tokenizer};
use memat::eval::{evaluate, k_sweep, Metrics, PromptScore, RecordScores};
use memat::experiment::Experiment;
use memat::memat::MematConfig;
use memat::model::{HeadPatch, ModelParams, ModelRef};
use memat::probe::{collect_probe_data, train_probes};

struct Setup {
    records: Vec<FactRecord>,
    tok: Tokenizer,
    edited: ModelParams,
    block: Vec<FactRecord>,
    _dir: tempfile::TempDir,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(&common::tiny_config(dir.path()), false).unwrap();
        let records = exp.gen().unwrap();
        exp.pretrain().unwrap();
        exp.edit().unwrap();
        let edited = exp.load_edited().unwrap();
        let block = exp.block_a(&records).unwrap();
        let tok = corpus_tokenizer(&records);
        Setup {
            records,
            tok,
            edited,
            block,
            _dir: dir,
        }
    })
}

fn score() -> impl Strategy<Value = PromptScore> {
    (-30.0f64..0.0, -30.0f64..0.0, any::<bool>(), any::<bool>()).prop_map(|(a, b, tn, tt)| PromptScore {
        logp_new: a,
        logp_true: b,
        top_new: tn,
        top_true: tt && !tn,
    })
}

fn record() -> impl Strategy<Value = RecordScores> {
    (score(), prop::collection::vec(score(), 2), prop::collection::vec(score(), 10)).prop_map(|(e, p, n)| RecordScores {
        record_id: 0,
        pair_id: 0,
        efficacy: e,
        paraphrases: p,
        neighbors: n,
    })
}

proptest! {
    #[test]
    fn metric_bounds_hold(records in prop::collection::vec(record(), 1..40)) {
        let m = Metrics::from_records(&records).unwrap();
        let all = m.as_array();
        for (i, v) in all.iter().enumerate() {
            prop_assert!(v.ci >= 0.0);
            if (3..6).contains(&i) {
                prop_assert!((-100.0..=100.0).contains(&v.value));
            } else {
                prop_assert!((0.0..=100.0).contains(&v.value));
            }
        }
    }
}

#[test]
fn greedy_new_object_implies_preference_when_objects_differ() {
    let s = setup();
    for lang in Language::BOTH {
        let report = evaluate(ModelRef::plain(&s.edited), &s.block, &s.tok, lang).unwrap();
        for (r, rec) in report.records.iter().zip(by_language(&s.block, lang)) {
            if r.efficacy.top_new && rec.target_new != rec.target_true {
                assert!(r.efficacy.prefers_new(), "record {}", r.record_id);
            }
        }
    }
}

#[test]
fn evaluation_is_read_only() {
    let s = setup();
    let before = s.edited.digest();
    let mut patch = HeadPatch::new();
    patch.insert(1, 2, ndarray::Array1::from_elem(8, 0.3));
    evaluate(ModelRef::patched(&s.edited, &patch), &s.records, &s.tok, Language::A).unwrap();
    assert_eq!(s.edited.digest(), before);
}

#[test]
fn zero_corrections_change_nothing() {
    let s = setup();
    let mut patch = HeadPatch::new();
    for h in 0..4 {
        patch.insert(0, h, ndarray::Array1::zeros(8));
    }
    let plain = evaluate(ModelRef::plain(&s.edited), &s.block, &s.tok, Language::B).unwrap();
    let zero = evaluate(ModelRef::patched(&s.edited, &patch), &s.block, &s.tok, Language::B).unwrap();
    assert_eq!(plain, zero);
}

#[test]
fn k_zero_reproduces_the_memit_report() {
    let s = setup();
    let records = by_language(&s.block, Language::A);
    let data = collect_probe_data(ModelRef::plain(&s.edited), &records, &s.tok, false, 0).unwrap();
    let (_, map) = train_probes(&data, &Default::default()).unwrap();
    let cfg = MematConfig {
        epochs: 1,
        ..MematConfig::default()
    };
    let sweep = k_sweep(&s.edited, &records, &s.tok, &map, &[0, 2], &cfg, Language::A).unwrap();
    assert_eq!(sweep.runs.len(), 2);
    assert_eq!(sweep.runs[0].1, sweep.baseline);
    assert_eq!(sweep.to_csv().lines().count(), 4);
}

#[test]
fn empty_record_list_is_an_input_error() {
    let s = setup();
    assert!(matches!(
        evaluate(ModelRef::plain(&s.edited), &[], &s.tok, Language::A),
        Err(memat::Error::Input(_))
    ));
}
