//! Per-layer uncentered feature covariances and the approximate null-space
//! projectors built from them.
//!
//! Covariances are over bias-augmented layer inputs `x̃ = (x, 1)`, matching the
//! `out × (in + 1)` layer parameter layout. An update `Δ` projected as `Δ·P`
//! satisfies `Δ·P·x̃ ≈ 0` for every stored input direction, which leaves the
//! layer's response to previous tasks' inputs unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{GradientSet, Network};
use crate::numerics::{matmul, matmul_transa, matmul_transb, sym_eig, DenseMatrix};

/// Rows forwarded per chunk when accumulating covariances.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCovariance {
    pub layer: usize,
    /// `(1/n) Σ x̃ x̃ᵀ`, dimension `in + 1`.
    pub cov: DenseMatrix,
    pub n: usize,
}

impl LayerCovariance {
    /// Neutral element for [`merge_covariance`].
    pub fn empty(layer: usize, dim: usize) -> Self {
        Self {
            layer,
            cov: DenseMatrix::zeros(dim, dim),
            n: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.rows()
    }
}

/// Forwards `inputs` through `net` (evaluation mode, no statistic updates) and
/// returns one covariance per extractor layer.
pub fn accumulate_covariance(net: &Network, inputs: &DenseMatrix) -> Result<Vec<LayerCovariance>> {
    ensure!(inputs.rows() > 0, "cannot accumulate covariance over an empty dataset");
    let layers = net.extractor().len();
    let mut sums: Vec<DenseMatrix> = net
        .extractor()
        .iter()
        .map(|l| DenseMatrix::zeros(l.in_dim() + 1, l.in_dim() + 1))
        .collect();
    let n = inputs.rows();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = inputs.select_rows(&idx);
        let layer_inputs = net.layer_inputs(&chunk)?;
        for (sum, x) in sums.iter_mut().zip(&layer_inputs[..layers]) {
            let xa = x.augment_ones();
            sum.axpy(1.0, &matmul_transa(&xa, &xa)?)?;
        }
        start = end;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| LayerCovariance {
            layer,
            cov: s.scale(1.0 / n as f64),
            n,
        })
        .collect())
}

/// Sample-count-weighted mean of two covariances of the same layer.
pub fn merge_covariance(prev: &LayerCovariance, new: &LayerCovariance) -> Result<LayerCovariance> {
    ensure!(prev.layer == new.layer, "merging covariances of different layers");
    ensure!(prev.dim() == new.dim(), "merging covariances of different sizes");
    if prev.n == 0 {
        return Ok(new.clone());
    }
    if new.n == 0 {
        return Ok(prev.clone());
    }
    let n = prev.n + new.n;
    let (wp, wn) = (prev.n as f64 / n as f64, new.n as f64 / n as f64);
    let cov = prev.cov.zip_with(&new.cov, |a, b| wp * a + wn * b)?;
    Ok(LayerCovariance {
        layer: prev.layer,
        cov,
        n,
    })
}

/// Layer-wise [`merge_covariance`] over whole networks' covariance lists.
pub fn merge_all(prev: &[LayerCovariance], new: &[LayerCovariance]) -> Result<Vec<LayerCovariance>> {
    ensure!(prev.len() == new.len(), "covariance lists differ in depth");
    prev.iter().zip(new).map(|(a, b)| merge_covariance(a, b)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// One symmetric `(in+1) × (in+1)` matrix per extractor layer.
    pub layers: Vec<DenseMatrix>,
    /// Number of null directions kept per layer.
    pub retained_dims: Vec<usize>,
    /// The relative eigenvalue threshold the projector was built with.
    pub threshold_used: f64,
}

impl Projector {
    pub fn identity_for(net: &Network) -> Self {
        let layers: Vec<DenseMatrix> = net
            .extractor()
            .iter()
            .map(|l| DenseMatrix::identity(l.in_dim() + 1))
            .collect();
        Self {
            retained_dims: layers.iter().map(DenseMatrix::rows).collect(),
            layers,
            threshold_used: f64::NAN,
        }
    }

    pub fn zeros_for(net: &Network) -> Self {
        Self {
            layers: net
                .extractor()
                .iter()
                .map(|l| DenseMatrix::zeros(l.in_dim() + 1, l.in_dim() + 1))
                .collect(),
            retained_dims: vec![0; net.extractor().len()],
            threshold_used: f64::NAN,
        }
    }

    pub fn fits(&self, net: &Network) -> bool {
        self.layers.len() == net.extractor().len()
            && self
                .layers
                .iter()
                .zip(net.extractor())
                .all(|(p, l)| p.rows() == l.in_dim() + 1)
    }

    /// `Δ_ℓ · P_ℓ` for each extractor-layer update (rows act on the input axis).
    pub fn project_layers(&self, deltas: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        ensure!(
            deltas.len() == self.layers.len(),
            "projector has {} layers, update has {}",
            self.layers.len(),
            deltas.len()
        );
        deltas
            .iter()
            .zip(&self.layers)
            .map(|(d, p)| {
                ensure!(
                    d.cols() == p.rows(),
                    "update width {} does not match projector size {}",
                    d.cols(),
                    p.rows()
                );
                matmul(d, p)
            })
            .collect()
    }
}

/// Eigenvectors at or below the threshold `eps_rel · λ_max` (all of them when
/// `λ_max = 0`).
fn null_basis(cov: &DenseMatrix, eps_rel: f64) -> Result<(DenseMatrix, Vec<f64>, f64)> {
    let eig = sym_eig(cov)?;
    let lmax = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let threshold = eps_rel * lmax;
    let keep: Vec<usize> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| lmax == 0.0 || l <= threshold)
        .map(|(i, _)| i)
        .collect();
    let d = cov.rows();
    let u = DenseMatrix::from_fn(d, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
    Ok((u, eig.eigenvalues, threshold))
}

pub fn build_projector(covs: &[LayerCovariance], eps_rel: f64) -> Result<Projector> {
    ensure!(
        (0.0..1.0).contains(&eps_rel),
        "eps_rel must lie in [0, 1), got {eps_rel}"
    );
    let mut layers = Vec::with_capacity(covs.len());
    let mut retained = Vec::with_capacity(covs.len());
    for c in covs {
        let (u, _, _) = null_basis(&c.cov, eps_rel)?;
        retained.push(u.cols());
        layers.push(matmul_transb(&u, &u)?);
    }
    Ok(Projector {
        layers,
        retained_dims: retained,
        threshold_used: eps_rel,
    })
}

/// Projects the extractor blocks of `grads`; head gradients pass through.
pub fn project_update(p: &Projector, grads: &GradientSet) -> Result<GradientSet> {
    Ok(GradientSet {
        extractor: p.project_layers(&grads.extractor)?,
        heads: grads.heads.clone(),
    })
}

/// `‖𝓧_range Δᵀ‖_F / ‖Δ‖_F`, where `𝓧_range` keeps only the eigen-directions
/// above the projector threshold. Zero for a zero update.
pub fn range_residual(cov: &LayerCovariance, eps_rel: f64, delta: &DenseMatrix) -> Result<f64> {
    ensure!(delta.cols() == cov.dim(), "update width does not match covariance");
    let norm = delta.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let eig = sym_eig(&cov.cov)?;
    let lmax = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    if lmax == 0.0 {
        return Ok(0.0);
    }
    let threshold = eps_rel * lmax;
    let d = cov.dim();
    let mut range = DenseMatrix::zeros(d, d);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > threshold {
            for i in 0..d {
                for j in 0..d {
                    range[(i, j)] += l * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
                }
            }
        }
    }
    Ok(matmul_transb(&range, delta)?.frobenius_norm() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cov_of(rows: &[Vec<f64>]) -> LayerCovariance {
        let x = DenseMatrix::from_rows(rows).unwrap();
        LayerCovariance {
            layer: 0,
            cov: matmul_transa(&x, &x).unwrap().scale(1.0 / rows.len() as f64),
            n: rows.len(),
        }
    }

    fn random_cov(dim: usize, n: usize, seed: u64) -> LayerCovariance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        cov_of(&rows)
    }

    #[test]
    fn single_sample_is_outer_product() {
        let net = Network::new(&ArchSpec::mlp(vec![2, 3]), 2, 0).unwrap();
        let x = DenseMatrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let covs = accumulate_covariance(&net, &x).unwrap();
        let expected = [[4.0, -2.0, 2.0], [-2.0, 1.0, -1.0], [2.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(covs[0].cov[(i, j)], expected[i][j]);
            }
        }
        assert_eq!(covs[0].n, 1);
    }

    #[test]
    fn duplicated_dataset_gives_same_covariance() {
        let net = Network::new(&ArchSpec::mlp(vec![3, 4, 4]), 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
        let xx = DenseMatrix::vstack(&[&x, &x]).unwrap();
        let a = accumulate_covariance(&net, &x).unwrap();
        let b = accumulate_covariance(&net, &xx).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            assert!(ca.cov.sub(&cb.cov).unwrap().max_abs() < 1e-14);
            assert_eq!(cb.n, 14);
        }
    }

    #[test]
    fn accumulate_matches_per_sample_oracle() {
        let net = Network::new(&ArchSpec::mlp(vec![3, 5, 4]), 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseMatrix::from_fn(300, 3, |_, _| rng.random_range(-1.0..1.0));
        let covs = accumulate_covariance(&net, &x).unwrap();
        for layer in 0..2 {
            let d = net.extractor()[layer].in_dim() + 1;
            let mut oracle = vec![vec![0.0; d]; d];
            for i in 0..300 {
                let row = x.select_rows(&[i]);
                let mut xi = net.forward(&row, 0).unwrap().layer_inputs[layer].row(0).to_vec();
                xi.push(1.0);
                for a in 0..d {
                    for b in 0..d {
                        oracle[a][b] += xi[a] * xi[b] / 300.0;
                    }
                }
            }
            for a in 0..d {
                for b in 0..d {
                    assert!((covs[layer].cov[(a, b)] - oracle[a][b]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let net = Network::new(&ArchSpec::mlp(vec![3, 4]), 2, 1).unwrap();
        assert!(accumulate_covariance(&net, &DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn merge_rules() {
        let a = random_cov(4, 5, 1);
        let b = random_cov(4, 9, 2);
        let c = random_cov(4, 3, 3);
        assert_eq!(merge_covariance(&LayerCovariance::empty(0, 4), &a).unwrap(), a);
        assert_eq!(merge_covariance(&a, &LayerCovariance::empty(0, 4)).unwrap(), a);
        let aa = merge_covariance(&a, &a).unwrap();
        assert!(aa.cov.sub(&a.cov).unwrap().max_abs() < 1e-15);
        assert_eq!(aa.n, 10);
        let left = merge_covariance(&merge_covariance(&a, &b).unwrap(), &c).unwrap();
        let right = merge_covariance(&a, &merge_covariance(&b, &c).unwrap()).unwrap();
        assert!(left.cov.sub(&right.cov).unwrap().max_abs() <= 1e-12);
        let ab = merge_covariance(&a, &b).unwrap();
        let ba = merge_covariance(&b, &a).unwrap();
        assert!(ab.cov.sub(&ba.cov).unwrap().max_abs() <= 1e-12);
        assert!(merge_covariance(&a, &random_cov(3, 2, 0)).is_err());
    }

    #[test]
    fn projector_limits() {
        let zero = LayerCovariance::empty(0, 3);
        let p = build_projector(&[zero], 1e-2).unwrap();
        assert_eq!(p.retained_dims, vec![3]);
        assert!(p.layers[0].sub(&DenseMatrix::identity(3)).unwrap().max_abs() < 1e-15);

        let ident = LayerCovariance {
            layer: 0,
            cov: DenseMatrix::identity(3),
            n: 1,
        };
        let p = build_projector(&[ident], 1e-2).unwrap();
        assert_eq!(p.retained_dims, vec![0]);
        assert_eq!(p.layers[0].max_abs(), 0.0);
    }

    #[test]
    fn axis_aligned_projection() {
        let cov = LayerCovariance {
            layer: 0,
            cov: DenseMatrix::diag(&[1.0, 0.0]),
            n: 1,
        };
        let p = build_projector(&[cov], 1e-3).unwrap();
        assert_eq!(p.layers[0], DenseMatrix::diag(&[0.0, 1.0]));
        let g = DenseMatrix::from_rows(&[vec![3.0, -4.0]]).unwrap();
        assert_eq!(p.project_layers(&[g]).unwrap()[0].as_slice(), &[0.0, -4.0]);
    }

    #[test]
    fn projector_is_idempotent_and_annihilates_range() {
        let cov = random_cov(8, 5, 7); // rank 5 in 8 dims
        let p = build_projector(&[cov.clone()], 1e-6).unwrap();
        assert_eq!(p.retained_dims, vec![3]);
        let pm = &p.layers[0];
        assert!(matmul(pm, pm).unwrap().sub(pm).unwrap().frobenius_norm() <= 1e-8);
        assert!(pm.asymmetry() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = DenseMatrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let once = p.project_layers(&[g]).unwrap();
        let twice = p.project_layers(&once).unwrap();
        assert!(once[0].sub(&twice[0]).unwrap().max_abs() <= 1e-12);

        let eig = sym_eig(&cov.cov).unwrap();
        for k in 0..5 {
            let u = DenseMatrix::new(8, 1, eig.eigenvector(k)).unwrap();
            assert!(matmul(&once[0], &u).unwrap().frobenius_norm() <= 1e-8);
        }
        assert!(range_residual(&cov, 1e-6, &once[0]).unwrap() <= 1e-6);
    }

    #[test]
    fn project_update_leaves_heads_alone() {
        let net = Network::new(&ArchSpec::mlp(vec![3, 4]), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = net
            .backward(&x, &[0, 1, 0, 1, 0, 1], 0, &crate::model::LossSpec::CROSS_ENTROPY)
            .unwrap();
        let same = project_update(&Projector::identity_for(&net), &g).unwrap();
        assert_eq!(same, g);
        let frozen = project_update(&Projector::zeros_for(&net), &g).unwrap();
        assert!(frozen.extractor.iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(frozen.heads, g.heads);
    }

    #[test]
    fn eps_rel_out_of_range_is_rejected() {
        assert!(build_projector(&[LayerCovariance::empty(0, 2)], 1.0).is_err());
        assert!(build_projector(&[LayerCovariance::empty(0, 2)], -0.1).is_err());
    }
}
