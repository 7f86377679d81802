//! Runs one experiment from a TOML config and writes all artifacts.
//!
//!     cargo run --release --example full_experiment -- configs/gaussian_toy.toml runs/example

use std::path::PathBuf;

use linear_connector::runner::{Experiment, ExperimentConfig};

fn main() -> linear_connector::Result<()> {
    let mut args = std::env::args().skip(1);
    let (mut cfg, raw) = match args.next() {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => {
            let cfg = ExperimentConfig::default();
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    cfg.output_dir = Some(
        args.next()
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("lincon-example")),
    );
    let record = Experiment::new(cfg.clone()).snapshot(raw).run()?;
    println!("variant {} on {} tasks", cfg.variant.name(), record.matrix.num_tasks);
    for (m, row) in record.matrix.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("after task {}: {}", m + 1, cells.join(" "));
    }
    println!("ACC {:.4}  BWT {:.4}", record.metrics.acc, record.metrics.bwt.unwrap_or(f64::NAN));
    for t in &record.timings {
        println!("{:<20} {:>8.3}s", t.stage, t.seconds);
    }
    println!("artifacts in {}", cfg.output_dir.expect("set above").display());
    Ok(())
}
