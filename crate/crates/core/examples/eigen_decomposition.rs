//! Decomposes a random symmetric matrix and reports the reconstruction and
//! orthonormality errors.
//!
//!     cargo run --example eigen_decomposition -- 32

use linear_connector::numerics::{matmul, matmul_transa, sym_eig, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> linear_connector::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    // BᵀB is symmetric positive semidefinite, like a feature covariance.
    let a = matmul_transa(&b, &b)?;
    let e = sym_eig(&a)?;
    let rec = e.reconstruct().sub(&a)?.frobenius_norm() / a.frobenius_norm();
    let gram = matmul_transa(&e.eigenvectors, &e.eigenvectors)?;
    let orth = gram.sub(&DenseMatrix::identity(n))?.frobenius_norm();
    println!("n = {n}");
    println!("largest eigenvalues: {:?}", &e.eigenvalues[..n.min(4)]);
    println!("smallest eigenvalue: {:.3e}", e.eigenvalues[n - 1]);
    println!("relative reconstruction error: {rec:.2e}");
    println!("orthonormality error: {orth:.2e}");
    let v0 = DenseMatrix::new(n, 1, e.eigenvector(0))?;
    let av = matmul(&a, &v0)?;
    println!("|A v0 - l0 v0|: {:.2e}", av.sub(&v0.scale(e.eigenvalues[0]))?.frobenius_norm());
    Ok(())
}
