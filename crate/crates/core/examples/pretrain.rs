// Pretrains the toy decoder on the corpus (or reuses a checkpoint already in
// runs/toy produced by the same configuration) and checks it recalls facts.
//
//   cargo run --release --example pretrain

use memat::dataset::{by_language, encode_prompt, fact_recall, Language};
use memat::experiment::{Experiment, ExperimentConfig, Stage};
use memat::model::{generate, GREEDY};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Pretrain)?;
    let (records, tok) = exp.load_corpus()?;
    let base = exp.load_base()?;
    println!("{} parameters, {} layers x {} heads", base.n_parameters(), base.config.n_layers, base.config.n_heads);

    for lang in Language::BOTH {
        let subset = by_language(&records, lang);
        println!("{lang}: greedy recall of the true object {:.3}", fact_recall(&base, &subset, &tok)?);
    }
    for r in records.iter().take(4) {
        let out = generate(&base, &encode_prompt(&tok, &r.efficacy_prompt)?, 1, GREEDY, 0, None)?;
        println!("{} -> {} (true: {})", r.efficacy_prompt, tok.decode(&out)?, r.target_true);
    }
    Ok(())
}
