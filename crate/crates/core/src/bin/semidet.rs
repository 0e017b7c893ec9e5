use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semidet::data::{write_coco, CocoDocument};
use semidet::eval::{evaluate_results, read_results};
use semidet::harness::config::parse_overrides;
use semidet::harness::report::summary_table;
use semidet::harness::sweep::{build_trainer, finish_run, resume_trainer, write_run};
use semidet::harness::{
    emit_report, prepare_data, read_rows, resolve_output_dir, run_sweep, summarize,
    ExperimentConfig, Mode, RunKey,
};
use semidet::selftrain::Checkpoint;
use semidet::Result;

/// Teacher-student semi-supervised detection experiments.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Without it the config's `output_dir` is used,
    /// below `$SEMIDET_OUT` when that is set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Config overrides as `--section.key value`, e.g. `--selftrain.tau 0.6`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured dataset and write it in COCO layout.
    Generate(Overrides),
    /// Train and test a single run.
    Train {
        #[arg(long, default_value = "semi")]
        mode: Mode,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Save a checkpoint here every `--checkpoint-every` iterations.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        checkpoint_every: usize,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every (mode, fraction, seed) of the configuration.
    Sweep(Overrides),
    /// Score a COCO result file against COCO ground truth.
    Eval {
        /// Ground-truth annotations JSON.
        #[arg(long)]
        gt: PathBuf,
        /// Detection results JSON.
        #[arg(long)]
        results: PathBuf,
    },
    /// Re-render the summary tables of a finished sweep from its CSV.
    Report {
        /// Sweep directory holding `test_metrics.csv` and `config.toml`.
        dir: PathBuf,
    },
}

fn load(config: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let pairs = parse_overrides(&overrides.overrides)?;
    let c = ExperimentConfig::load(config, &pairs)?;
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(o) => {
            let config = load(cli.config.as_deref(), &o)?;
            let out = resolve_output_dir(&config, cli.out);
            let data = prepare_data(&config)?;
            write_coco(&data.dataset, &out)?;
            println!(
                "wrote {} images ({} train / {} val / {} test) to {}",
                data.dataset.samples.len(),
                data.split.train.len(),
                data.split.val.len(),
                data.split.test.len(),
                out.display()
            );
        }
        Command::Train {
            mode,
            fraction,
            seed,
            checkpoint,
            checkpoint_every,
            resume,
            overrides,
        } => {
            let config = load(cli.config.as_deref(), &overrides)?;
            let out = resolve_output_dir(&config, cli.out);
            let key = RunKey {
                mode,
                fraction,
                seed,
            };
            let data = prepare_data(&config)?;
            let mut trainer = match resume {
                Some(path) => resume_trainer(&config, &data, key, Checkpoint::load(&path)?)?,
                None => build_trainer(&config, &data, key)?,
            };
            let every = checkpoint_every.max(1);
            while !trainer.is_done() {
                let next = (trainer.state.iteration / every + 1) * every;
                trainer.run_until(next)?;
                if let Some(path) = &checkpoint {
                    trainer.checkpoint().save(path)?;
                }
                if let Some(p) = trainer.history().last() {
                    log::info!(
                        "iteration {}: val mAP {:.2}",
                        p.iteration,
                        100.0 * p.map_5095
                    );
                }
            }
            let outcome = finish_run(&config, &data, key, &trainer)?;
            let dir = out.join("runs").join(key.dir_name());
            write_run(&config, &data, &outcome, &dir)?;
            println!(
                "{} {} seed {}: test mAP@[.5:.95] {:.2}, mAP@.5 {:.2} (teacher from iteration {})",
                mode.label(),
                fraction,
                seed,
                outcome.test.map_5095,
                outcome.test.map_50,
                outcome.test.iteration
            );
        }
        Command::Sweep(o) => {
            let config = load(cli.config.as_deref(), &o)?;
            let out = resolve_output_dir(&config, cli.out);
            log::info!("{} runs into {}", config.run_count(), out.display());
            let result = run_sweep(&config, &out)?;
            print!(
                "{}",
                summary_table(&summarize(&result.test), |c| c.map_5095)
            );
        }
        Command::Eval { gt, results } => {
            let doc = CocoDocument::read(&gt)?;
            let table = evaluate_results(&doc, &read_results(&results)?)?;
            println!("mAP@[.5:.95] {:.2}", 100.0 * table.map_5095);
            println!("mAP@.5       {:.2}", 100.0 * table.map_50);
            for (name, ap) in doc.class_names().iter().zip(&table.class_ap) {
                match ap {
                    Some(ap) => println!("  {name}: {:.2}", 100.0 * ap),
                    None => println!("  {name}: -"),
                }
            }
        }
        Command::Report { dir } => {
            let config = ExperimentConfig::load(Some(&dir.join("config.toml")), &[])?;
            let rows = read_rows(&dir.join("test_metrics.csv"))?;
            let out = cli.out.unwrap_or_else(|| dir.clone());
            let names = match &config.dataset.coco_dir {
                Some(d) => CocoDocument::read(&d.join("annotations.json"))?.class_names(),
                None => config.dataset.scene_spec().class_names(),
            };
            let summary = emit_report(&rows, &names, &out)?;
            print!("{}", summary_table(&summary, |c| c.map_5095));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
