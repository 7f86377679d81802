//! Runs every method variant on the default five-task Gaussian stream over
//! three seeds and prints ACC, BWT and final-task intransigence side by side,
//! plus the β-sweep rank correlation for the connector.
//!
//!     cargo run --release --example compare_variants

use std::time::Instant;

use linear_connector::evaluation::spearman;
use linear_connector::runner::{run_experiment, ExperimentConfig, JointOracleMode, Variant};

fn main() -> linear_connector::Result<()> {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let variants = [
        Variant::Connector,
        Variant::StabilityOnly,
        Variant::PlasticityOnly,
        Variant::NaiveFinetune,
    ];
    println!("{:<16} {:>5} {:>8} {:>8} {:>8}", "variant", "seed", "ACC", "BWT", "I_K");
    for v in variants {
        for &seed in &seeds {
            let mut cfg = ExperimentConfig {
                variant: v,
                joint_oracle: JointOracleMode::Last,
                ..ExperimentConfig::default()
            }
            .with_seed(seed);
            if v == Variant::Connector {
                cfg.sweep.grid_size = 21;
            }
            let r = run_experiment(&cfg)?;
            println!(
                "{:<16} {:>5} {:>8.4} {:>8.4} {:>8.4}",
                v.name(),
                seed,
                r.metrics.acc,
                r.metrics.bwt.unwrap_or(f64::NAN),
                r.metrics.final_im().unwrap_or(f64::NAN)
            );
            for scan in &r.scans {
                let current = scan.curve(scan.task_count() - 1);
                let rho = spearman(&scan.betas, &current).unwrap_or(f64::NAN);
                println!(
                    "    t={} rho={rho:.3} max_jump={:.3} current[0]={:.3} current[1]={:.3}",
                    scan.task_count(),
                    scan.max_adjacent_jump(),
                    current[0],
                    current[current.len() - 1]
                );
            }
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
