// Refits the corrections for every head count in eval.k_values, always taking
// the K most accurate probe heads.
//
//   cargo run --release --example head_sweep

use memat::experiment::{Experiment, ExperimentConfig, Stage};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Probe)?;
    let sweep = exp.sweep()?;
    println!("K=0 (edit only): {}", sweep.baseline.summary());
    for (k, r) in &sweep.runs {
        println!("K={k}: {}", r.summary());
    }
    Ok(())
}
