use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use linear_connector::runner::{
    export_record, recompute_metrics, run_seeds, Experiment, ExperimentConfig, ExportFormat, RunRecord, Variant,
};
use linear_connector::Error;

#[derive(Parser)]
#[command(name = "lincon", version, about = "Linear-connector continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or every seed in the config's `seeds` list).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Single seed for both data and training; overrides `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the connector with a β scan after every task from the second on.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics.json from a run directory's stored accuracy matrix.
    Metrics {
        #[arg(long)]
        record: PathBuf,
    },
    /// Export a run's metrics, matrix and sweeps as CSV or JSON.
    Export {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        format: ExportFormat,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Error::Stage { stage, .. } = &e {
                eprintln!("stage: {stage}");
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(config: &PathBuf, out: Option<PathBuf>) -> Result<(ExperimentConfig, String), Error> {
    let (mut cfg, raw) = ExperimentConfig::load(config).map_err(|e| e.in_stage("config"))?;
    if let Some(out) = out {
        cfg.output_dir = Some(out);
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("runs").join(&cfg.run_id));
    }
    Ok((cfg, raw))
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run {
            config,
            seed,
            variant,
            beta,
            out,
        } => {
            let (mut cfg, raw) = load(&config, out)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if beta.is_some() {
                cfg.beta = beta;
            }
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
                cfg.seeds.clear();
            }
            if cfg.seeds.is_empty() {
                let record = Experiment::new(cfg).snapshot(raw).run()?;
                report(&record);
            } else {
                let (records, summary) = run_seeds(&cfg, Some(&raw))?;
                for r in &records {
                    report(r);
                }
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
        }
        Command::Sweep { config, grid, out } => {
            let (mut cfg, raw) = load(&config, out)?;
            cfg.sweep.grid_size = grid;
            if cfg.variant != Variant::Connector {
                return Err(Error::Config(format!("sweep needs the connector variant, config has {}", cfg.variant)).in_stage("config"));
            }
            let record = Experiment::new(cfg).snapshot(raw).run()?;
            report(&record);
            for s in &record.scans {
                println!("sweep_task{}.csv: {} grid points", s.task_count(), s.betas.len());
            }
        }
        Command::Metrics { record } => {
            let m = recompute_metrics(&record).map_err(|e| e.in_stage("metrics"))?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Export { record, format } => {
            for p in export_record(&record, format).map_err(|e| e.in_stage("export"))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn report(r: &RunRecord) {
    let dir = r
        .config
        .output_dir
        .as_ref()
        .map(|d| d.display().to_string())
        .unwrap_or_default();
    let bwt = r.metrics.bwt.map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into());
    let im = r.metrics.final_im().map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} [{}] seed {}: ACC {:.4}  BWT {bwt}  I_K {im}{}  -> {dir}",
        r.config.run_id,
        r.config.variant,
        r.config.train.seed,
        r.metrics.acc,
        if r.resumed { "  (already complete)" } else { "" },
    );
}
