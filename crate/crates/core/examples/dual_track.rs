//! One continual step: train task 1, then train the stable and plastic tracks
//! on task 2 and fuse them with weight 1/2.
//!
//!     cargo run --release --example dual_track

use linear_connector::connector::fuse;
use linear_connector::evaluation::evaluate;
use linear_connector::model::Network;
use linear_connector::nullspace::{accumulate_covariance, build_projector};
use linear_connector::runner::ExperimentConfig;
use linear_connector::taskgen::make_stream;
use linear_connector::training::{train_first_task, train_task_dual};

fn main() -> linear_connector::Result<()> {
    let cfg = ExperimentConfig::default();
    let stream = make_stream(&cfg.stream)?;
    let (t1, t2) = (&stream.tasks[0], &stream.tasks[1]);
    let init = Network::new(&cfg.model, t1.meta.num_classes(), cfg.train.seed)?;
    let (prev, _) = train_first_task(init, &t1.meta, &t1.train, &cfg.train)?;
    let projector = build_projector(&accumulate_covariance(&prev, &t1.train.inputs)?, cfg.train.eps_rel)?;
    let dual = train_task_dual(&prev, &projector, &t2.meta, &t2.train, &cfg.train, &mut ())?;
    let fused = fuse(&dual.stable, &dual.plastic, 2)?;
    let (h1, h2) = (t1.held_out(), t2.held_out());
    println!("{:<8} {:>7} {:>7}", "model", "task 1", "task 2");
    println!("{:<8} {:>7.3} {:>7}", "before", evaluate(&prev, &h1)?, "-");
    for (name, net) in [("stable", &dual.stable), ("plastic", &dual.plastic), ("fused", &fused)] {
        println!("{name:<8} {:>7.3} {:>7.3}", evaluate(net, &h1)?, evaluate(net, &h2)?);
    }
    Ok(())
}
