//! Computes ACC, BWT and intransigence for a hand-written accuracy matrix.
//!
//!     cargo run --example metrics_report

use linear_connector::evaluation::{AccuracyMatrix, MetricReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut m = AccuracyMatrix::new(3);
    m.record_row(0, vec![0.95])?;
    m.record_row(1, vec![0.90, 0.93])?;
    m.record_row(2, vec![0.86, 0.90, 0.94])?;
    let report = MetricReport::from_matrix(&m, &[None, None, Some(0.97)])?;
    println!("ACC {:.4}", report.acc);
    println!("BWT {:.4}", report.bwt.unwrap_or(f64::NAN));
    println!("I_3 {:.4}", report.final_im().unwrap_or(f64::NAN));
    println!();
    m.write_csv(std::io::stdout().lock())?;
    println!();
    report.write_csv(std::io::stdout().lock())?;
    Ok(())
}
