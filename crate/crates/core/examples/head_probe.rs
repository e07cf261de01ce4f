// Fits a logistic probe on every attention head of the edited model to tell
// true from counterfactual completions, with a shuffled-label control, and
// picks the top-K heads.
//
//   cargo run --release --example head_probe

use memat::dataset::{by_language, Language};
use memat::experiment::{Experiment, ExperimentConfig, Stage};
use memat::model::ModelRef;
use memat::probe::{chance_bound, collect_probe_data, select_top_k, train_probes};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Edit)?;
    let cfg = exp.config();
    let (records, tok) = exp.load_corpus()?;
    let edited = exp.load_edited()?;
    let block = by_language(&exp.block_a(&records)?, Language::A);

    let data = collect_probe_data(ModelRef::plain(&edited), &block, &tok, cfg.probe.refine, 0)?;
    let (_, accuracy) = train_probes(&data, &cfg.probe.training)?;
    let (_, shuffled) = train_probes(&data.shuffled_labels(1), &cfg.probe.training)?;

    println!("validation accuracy per head (rows: layers)");
    for l in 0..accuracy.n_layers {
        let row: Vec<String> = (0..accuracy.n_heads).map(|h| format!("{:.2}", accuracy.get(l, h))).collect();
        println!("  L{l}: {}", row.join(" "));
    }
    println!(
        "max {:.3}, mean {:.3}; shuffled labels max {:.3}; chance bound {:.3}",
        accuracy.max(),
        accuracy.mean(),
        shuffled.max(),
        chance_bound(data.validation.len())
    );
    println!("top-{} heads (layer, head): {:?}", cfg.memat.k, select_top_k(&accuracy, cfg.memat.k)?);
    Ok(())
}
