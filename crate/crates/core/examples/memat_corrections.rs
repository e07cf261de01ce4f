// Optimizes additive corrections at the selected heads of the edited model
// and compares them with the plain edit and the mean-activation baseline in
// both languages.
//
//   cargo run --release --example memat_corrections

use memat::dataset::{by_language, Language};
use memat::eval::evaluate;
use memat::experiment::{Experiment, ExperimentConfig, Stage};
use memat::memat::iti_baseline;
use memat::model::ModelRef;
use memat::probe::collect_probe_data;

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let exp = Experiment::new(&ExperimentConfig::default(), false)?;
    exp.prepare(Stage::Optimize)?;
    let (records, tok) = exp.load_corpus()?;
    let edited = exp.load_edited()?;
    let set = exp.load_corrections()?;
    let block = exp.block_a(&records)?;
    println!("{} heads, epoch losses {:?}", set.positions.len(), set.meta.epoch_losses);

    let data = collect_probe_data(ModelRef::plain(&edited), &by_language(&block, Language::A), &tok, false, 0)?;
    let iti = iti_baseline(&data, &set.positions, 1.0)?;
    let (patch, iti_patch) = (set.to_patch(), iti.to_patch());

    for lang in Language::BOTH {
        println!("\n{lang}");
        for (name, model) in [
            ("memit", ModelRef::plain(&edited)),
            ("memat", ModelRef::patched(&edited, &patch)),
            ("mean-act", ModelRef::patched(&edited, &iti_patch)),
        ] {
            let m = evaluate(model, &block, &tok, lang)?.metrics;
            println!(
                "  {name:>8}: ES {:5.1}  EM {:6.1}  PM {:6.1}  NS {:5.1}  NM {:5.1}",
                m.es.value, m.em.value, m.pm.value, m.ns.value, m.nm.value
            );
        }
    }
    Ok(())
}
