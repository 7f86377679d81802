//! Trains on the first task, builds the null-space projector from its feature
//! covariance, and shows how much of a random update survives projection and
//! how little of it reaches the old task's feature range.
//!
//!     cargo run --release --example null_space_projection

use linear_connector::model::Network;
use linear_connector::nullspace::{accumulate_covariance, build_projector, range_residual};
use linear_connector::numerics::DenseMatrix;
use linear_connector::runner::ExperimentConfig;
use linear_connector::taskgen::make_stream;
use linear_connector::training::train_first_task;

fn main() -> linear_connector::Result<()> {
    let cfg = ExperimentConfig::default();
    let stream = make_stream(&cfg.stream)?;
    let task = &stream.tasks[0];
    let init = Network::new(&cfg.model, task.meta.num_classes(), cfg.train.seed)?;
    let (net, _) = train_first_task(init, &task.meta, &task.train, &cfg.train)?;
    let covs = accumulate_covariance(&net, &task.train.inputs)?;
    for eps in [1e-1, 1e-2, 1e-3] {
        let p = build_projector(&covs, eps)?;
        println!("eps_rel {eps:>6}: retained null dimensions per layer {:?}", p.retained_dims);
    }
    let p = build_projector(&covs, cfg.train.eps_rel)?;
    let deltas: Vec<DenseMatrix> = net
        .extractor()
        .iter()
        .map(|l| DenseMatrix::from_fn(l.params.rows(), l.params.cols(), |i, j| ((i * 31 + j * 17) as f64).sin()))
        .collect();
    let projected = p.project_layers(&deltas)?;
    for (l, (d, pd)) in deltas.iter().zip(&projected).enumerate() {
        println!(
            "layer {l}: kept {:.1}% of the update norm, range residual {:.2e} before and {:.2e} after",
            100.0 * pd.frobenius_norm() / d.frobenius_norm(),
            range_residual(&covs[l], cfg.train.eps_rel, d)?,
            range_residual(&covs[l], cfg.train.eps_rel, pd)?
        );
    }
    Ok(())
}
