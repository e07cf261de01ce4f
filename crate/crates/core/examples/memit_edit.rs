// Writes 50 counterfactuals into the MLPs of the critical layers with one
// least-squares update and scores the edit before and after.
//
//   cargo run --release --example memit_edit

use memat::dataset::{by_language, encode_prompt, Language};
use memat::eval::evaluate;
use memat::experiment::{Experiment, ExperimentConfig, Stage};
use memat::memit::{apply_edit, KeyBank};
use memat::model::{generate, ModelRef, GREEDY};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::default();
    let exp = Experiment::new(&cfg, false)?;
    exp.prepare(Stage::Pretrain)?;
    let (records, tok) = exp.load_corpus()?;
    let base = exp.load_base()?;
    let cfg = exp.config();

    let block = exp.block_a(&records)?;
    let requests = by_language(&block, Language::A);
    let e = &cfg.edit;
    let bank = KeyBank::from_records(&base, &records, &block, &tok, &e.critical_layers, e.covariance_sample_count, e.seed)?;
    let outcome = apply_edit(&base, &requests, &tok, e, &bank)?;
    println!(
        "edited {} facts at layers {:?}: {} targets reached the gate, mean target NLL {:.3}",
        requests.len(),
        outcome.delta.layers,
        outcome.stats.targets_gated,
        outcome.stats.mean_target_nll
    );

    for (name, params) in [("base", &base), ("edited", &outcome.params)] {
        let report = evaluate(ModelRef::plain(params), &block, &tok, Language::A)?;
        println!("{name:>6}: {}", report.summary());
    }
    for r in requests.iter().take(3) {
        let prompt = encode_prompt(&tok, &r.efficacy_prompt)?;
        let before = tok.decode(&generate(&base, &prompt, 1, GREEDY, 0, None)?)?;
        let after = tok.decode(&generate(&outcome.params, &prompt, 1, GREEDY, 0, None)?)?;
        println!("{}: {before} -> {after} (requested {})", r.efficacy_prompt, r.target_new);
    }
    Ok(())
}
