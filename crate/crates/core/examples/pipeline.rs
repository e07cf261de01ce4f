// Drives the whole pipeline from a TOML configuration with command-line style
// overrides, then shows that a changed upstream setting is caught.
//
//   cargo run --release --example pipeline

use memat::experiment::{Against, Experiment, ExperimentConfig};

const CONFIG: &str = r#"
seed = 3

[paths]
root = "runs/pipeline_demo"

[corpus]
n_pairs = 40
subject_words = 80

[model]
n_layers = 2
n_heads = 4
d_model = 32
d_ff = 128

[pretrain]
steps = 3000
lr = 3e-3
eval_every = 0

[edit]
critical_layers = [0]
target_opt_steps = 100

[memat]
k = 4
epochs = 3

[eval]
n_edit = 12
block_b_offset = 12
k_values = [2, 4]
scale_indices = [0, 2]
"#;

fn main() -> memat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = ExperimentConfig::from_toml(CONFIG)?.with_overrides(&["edit.covariance_scale=0.01"])?;
    let exp = Experiment::new(&cfg, false)?;
    println!("{} records", exp.gen()?.len());
    let pre = exp.pretrain()?;
    println!("pretrained: loss {:.3} -> {:.3}, recall {:.3}", pre.initial_loss, pre.final_loss, pre.recall);
    exp.edit()?;
    println!("probe max accuracy {:.3}", exp.probe()?.accuracy.max());
    exp.optimize()?;
    for against in [Against::Baseline, Against::Memit, Against::Memat] {
        for r in exp.eval(against)? {
            println!("{:>8} {}", against.name(), r.summary());
        }
    }
    println!("reports in {}", exp.reports_dir().display());

    let changed = cfg.with_overrides(&["model.d_ff=64"])?;
    match Experiment::new(&changed, false)?.edit() {
        Err(e) => println!("after changing the model: {e}"),
        Ok(_) => println!("unexpected: stale checkpoint accepted"),
    }
    Ok(())
}
