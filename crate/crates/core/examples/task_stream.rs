//! Generates the default class-incremental Gaussian stream, writes it to a
//! directory as CSV, and reads it back.
//!
//!     cargo run --example task_stream -- /tmp/stream

use std::path::PathBuf;

use linear_connector::taskgen::{export_stream, import_stream, make_stream, GeneratorKind, StreamSpec};

fn main() -> linear_connector::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("lincon-stream"));
    let stream = make_stream(&StreamSpec::default())?;
    for t in &stream.tasks {
        println!(
            "task {}: classes {:?}, {} train / {} test samples",
            t.meta.task_id + 1,
            t.meta.class_ids,
            t.train.len(),
            t.test.len()
        );
    }
    export_stream(&stream, &dir)?;
    let back = import_stream(&dir)?;
    let same = back
        .tasks
        .iter()
        .zip(&stream.tasks)
        .all(|(a, b)| a.train.inputs == b.train.inputs && a.test.labels == b.test.labels);
    println!("exported to {} and re-imported, identical: {same}", dir.display());

    let rings = make_stream(&StreamSpec {
        generator: GeneratorKind::TwoRings,
        num_classes: 4,
        num_tasks: 2,
        input_dim: 2,
        ..StreamSpec::default()
    })?;
    println!("two-rings stream: {} tasks over {} classes", rings.num_tasks(), rings.total_classes());
    Ok(())
}
