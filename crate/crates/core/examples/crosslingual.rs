// Edits in one language and measures how much of the edit carries over to
// the other, split by how much the two subjects share.
//
//   cargo run --release --example crosslingual

use memat::dataset::Stratum;
use memat::experiment::{Experiment, ExperimentConfig, Stage};

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Edit)?;
    let edit = exp.config().eval.edit_language;
    let m = exp.crosslingual()?;
    print!("{}", m.to_csv());
    for stratum in [Stratum::Identical, Stratum::Low] {
        if let (Some(cross), Some(drop)) = (m.get(edit, edit.other(), stratum), m.drop(edit, stratum)) {
            println!(
                "{stratum:?} subjects, edit in {edit}, read in {}: ES {:.1}, EM {:.1}; loss vs same language ES {:.1}, EM {:.1}",
                edit.other(),
                cross.metrics.es.value,
                cross.metrics.em.value,
                drop.es,
                drop.em
            );
        }
    }
    Ok(())
}
