use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use memat::experiment::{Against, Experiment, ExperimentConfig};
use memat::Result;

/// Memory-editing pipeline on a desk-scale toy transformer.
#[derive(Parser)]
#[command(name = "memat", version)]
struct Cli {
    /// TOML experiment config (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by its dotted name, e.g. `--set edit.covariance_scale=0.05`.
    #[arg(long = "set", value_name = "FIELD=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-record work (overrides eval.workers; 0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Accept upstream artifacts produced by a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bilingual fact corpus.
    Gen,
    /// Pretrain the toy model on the corpus.
    Pretrain,
    /// Edit block A into the pretrained model.
    Edit,
    /// Train per-head probes on the edited model and pick the top-K heads.
    Probe,
    /// Optimize head corrections at the selected heads.
    Optimize,
    /// Evaluate block A in both languages.
    Eval {
        #[arg(long, default_value = "memat", value_parser = ["baseline", "memit", "memat"])]
        against: String,
    },
    /// Run MEMAT for every K in eval.k_values.
    Sweep,
    /// Edit-size scaling curves with recycled corrections.
    Scale,
    /// Edit block B and reuse the block-A corrections.
    Recycle,
    /// Every stage from gen through eval.
    Run,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(w) = cli.workers {
        cfg.eval.workers = w;
    }
    if cfg.eval.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.eval.workers)
            .build_global()
            .map_err(|e| memat::Error::Config(e.to_string()))?;
    }
    let exp = Experiment::new(&cfg, cli.force)?;
    match cli.command {
        Command::Gen => {
            let records = exp.gen()?;
            println!("{} records", records.len());
        }
        Command::Pretrain => {
            let r = exp.pretrain()?;
            println!("steps {} loss {:.4} -> {:.4} recall {:.3}", r.steps, r.initial_loss, r.final_loss, r.recall);
        }
        Command::Edit => {
            let d = exp.edit()?;
            println!("edited {} records at layers {:?}", d.record_ids.len(), d.layers);
        }
        Command::Probe => {
            let p = exp.probe()?;
            println!("max accuracy {:.3}, heads {:?}", p.accuracy.max(), p.psi);
        }
        Command::Optimize => {
            let s = exp.optimize()?;
            println!("{} corrections, final loss {:?}", s.positions.len(), s.meta.epoch_losses.last());
        }
        Command::Eval { against } => {
            for r in exp.eval(Against::parse(&against)?)? {
                println!("{}", r.summary());
            }
        }
        Command::Sweep => print!("{}", exp.sweep()?.to_csv()),
        Command::Scale => {
            for p in exp.scale()?.points {
                println!("n={}: EM memit {:.1} memat {:.1}", p.n, p.memit.metrics.em.value, p.memat.metrics.em.value);
            }
        }
        Command::Recycle => {
            let r = exp.recycle()?;
            for (a, b) in r.memit.iter().zip(&r.memat) {
                println!("memit    {}\nrecycled {}", a.summary(), b.summary());
            }
        }
        Command::Run => exp.run_all()?,
        Command::Config => print!("{}", exp.config().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let schema = ExperimentConfig::default()
        .to_toml()
        .map(|t| format!("Config fields and defaults (use --set FIELD=VALUE):\n\n{t}"))
        .unwrap_or_default();
    let mut command = Cli::command();
    let names: Vec<String> = command.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        command = command.mut_subcommand(name, |c| c.after_long_help(schema.clone()));
    }
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
