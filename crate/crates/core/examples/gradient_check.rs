//! Compares backpropagated gradients with central finite differences for a
//! small network under cross-entropy plus feature distillation.
//!
//!     cargo run --example gradient_check

use linear_connector::model::{ArchSpec, LossSpec, Network};
use linear_connector::numerics::DenseMatrix;

fn main() -> linear_connector::Result<()> {
    let mut net = Network::new(&ArchSpec::mlp(vec![4, 8, 6]), 3, 7)?;
    let x = DenseMatrix::from_fn(5, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
    let labels = [0, 2, 1, 1, 0];
    let reference = DenseMatrix::from_fn(5, 6, |i, j| ((i + 2 * j) as f64 * 0.21).cos().abs());
    let spec = LossSpec::with_distillation(&reference, 1.0);
    let (loss, grads) = net.backward(&x, &labels, 0, &spec)?;
    println!("loss {loss:.6}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for layer in 0..net.extractor().len() {
        for k in 0..net.extractor()[layer].params.as_slice().len() {
            let orig = net.extractor()[layer].params.as_slice()[k];
            net.extractor_mut()[layer].params.as_mut_slice()[k] = orig + h;
            let up = net.backward(&x, &labels, 0, &spec)?.0;
            net.extractor_mut()[layer].params.as_mut_slice()[k] = orig - h;
            let down = net.backward(&x, &labels, 0, &spec)?.0;
            net.extractor_mut()[layer].params.as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.extractor[layer].as_slice()[k];
            let scale = numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((numeric - analytic).abs() / scale);
        }
        println!("layer {layer}: checked, running worst relative error {worst:.2e}");
    }
    Ok(())
}
