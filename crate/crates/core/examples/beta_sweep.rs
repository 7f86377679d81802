//! Scans the linear path between the two tracks at every task and writes the
//! curves as CSV.
//!
//!     cargo run --release --example beta_sweep -- 11

use linear_connector::evaluation::spearman;
use linear_connector::runner::{run_sweep, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(11);
    let scans = run_sweep(&ExperimentConfig::default(), grid)?;
    for (i, scan) in scans.iter().enumerate() {
        let t = i + 2;
        let current = scan.curve(scan.task_count() - 1);
        let old: Vec<f64> = (0..scan.betas.len())
            .map(|b| scan.accuracy[b][..scan.task_count() - 1].iter().sum::<f64>() / (scan.task_count() - 1) as f64)
            .collect();
        println!(
            "t={t}: current task {:.3} -> {:.3} (rho {:.2}), old tasks {:.3} -> {:.3}, max jump {:.3}",
            current[0],
            current[current.len() - 1],
            spearman(&scan.betas, &current).unwrap_or(f64::NAN),
            old[0],
            old[old.len() - 1],
            scan.max_adjacent_jump()
        );
    }
    let mut out = std::io::stdout().lock();
    println!("\nsweep at t={}:", scans.len() + 1);
    scans.last().expect("at least one scan").write_csv(&mut out)?;
    Ok(())
}
