// Reuses corrections trained on block A for a disjoint block B, then traces
// edit quality against the number of simultaneous edits.
//
//   cargo run --release --example recycle_and_scale

use memat::experiment::{Experiment, ExperimentConfig, Stage};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Optimize)?;

    let recycled = exp.recycle()?;
    for (plain, patched) in recycled.memit.iter().zip(&recycled.memat) {
        println!("block B, {}: EM {:.1} -> {:.1} with recycled corrections", plain.language, plain.metrics.em.value, patched.metrics.em.value);
    }

    let curves = exp.scale()?;
    println!("\n{:>6} {:>10} {:>10}", "edits", "EM memit", "EM memat");
    for p in &curves.points {
        println!("{:>6} {:>10.1} {:>10.1}", p.n, p.memit.metrics.em.value, p.memat.metrics.em.value);
    }
    Ok(())
}
