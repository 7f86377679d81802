//! Dense real linear algebra: a row-major `DenseMatrix` and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries. Rejects a length mismatch and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "entry count {} does not match {rows}x{cols}",
            data.len()
        );
        ensure!(
            data.iter().all(|x| x.is_finite()),
            "matrix entries must be finite"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Rows `indices` gathered into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&DenseMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        ensure!(
            parts.iter().all(|m| m.cols == cols),
            "vstack: column counts differ"
        );
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Appends a constant-one column (bias augmentation).
    pub fn augment_ones(&self) -> Self {
        let c = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * c);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.push(1.0);
        }
        Self {
            rows: self.rows,
            cols: c,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(
            self.shape() == other.shape(),
            "shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        ensure!(self.shape() == other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Largest absolute difference between `self` and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows.min(self.cols) {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    ensure!(
        a.cols == b.rows,
        "matmul: {}x{} times {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_transb(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    ensure!(a.cols == b.cols, "matmul_transb: inner dimensions differ");
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out[(i, j)] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_transa(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    ensure!(a.rows == b.rows, "matmul_transa: row counts differ");
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out.row_mut(i).iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector paired with `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let v = &self.eigenvectors;
        let scaled = DenseMatrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, j)] * self.eigenvalues[j]);
        matmul_transb(&scaled, v).expect("congruent by construction")
    }
}

const MAX_SWEEPS: usize = 100;
const OFFDIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm drops to `1e-12 · ‖A‖_F`;
/// gives up after 100 sweeps. Eigenvectors are normalized so that their first
/// nonzero component is positive.
pub fn sym_eig(a: &DenseMatrix) -> Result<EigenDecomposition> {
    ensure!(
        a.rows == a.cols,
        "sym_eig needs a square matrix, got {}x{}",
        a.rows,
        a.cols
    );
    ensure!(a.is_finite(), "sym_eig input has non-finite entries");
    let n = a.rows;
    let norm = a.frobenius_norm();
    ensure!(
        a.asymmetry() <= SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE),
        "sym_eig input is not symmetric (max |a_ij - a_ji| = {:e})",
        a.asymmetry()
    );

    let mut m = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let target = OFFDIAG_TOL * norm;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&m) > target {
        return Err(Error::Numerical(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order among exact ties, so output is bit-reproducible.
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let sign = (0..n)
            .map(|r| v[(r, src)])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for r in 0..n {
            eigenvectors[(r, col)] = sign * v[(r, src)];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// `M ← Jᵀ M J`, `V ← V J` for the rotation in the (p, q) plane.
fn rotate(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows;
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn orthonormality_error(v: &DenseMatrix) -> f64 {
        let vtv = matmul_transa(v, v).unwrap();
        vtv.sub(&DenseMatrix::identity(v.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0]);
        assert!(orthonormality_error(&e.eigenvectors) < 1e-15);
    }

    #[test]
    fn diagonal_is_already_decomposed() {
        let e = sym_eig(&DenseMatrix::diag(&[3.0, 0.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 0.0]);
        assert_eq!(e.eigenvector(0), vec![1.0, 0.0]);
        assert_eq!(e.eigenvector(1), vec![0.0, 1.0]);
    }

    #[test]
    fn ascending_diagonal_is_reordered() {
        let e = sym_eig(&DenseMatrix::diag(&[0.5, 2.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0, 1.0, 0.5]);
        assert_eq!(e.eigenvector(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_5x5_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_symmetric(5, &mut rng);
        let e = sym_eig(&a).unwrap();
        let rel = e.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel <= 1e-8, "relative reconstruction error {rel:e}");
        assert!(orthonormality_error(&e.eigenvectors) <= 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            sym_eig(&DenseMatrix::zeros(2, 3)),
            Err(Error::Precondition(_))
        ));
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_matrix_decomposes() {
        let e = sym_eig(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
        assert_eq!(e.eigenvectors, DenseMatrix::identity(3));
    }

    #[test]
    fn psd_gram_matrix_has_nonnegative_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // rank-deficient: 20 samples in 30 dimensions
        let x = DenseMatrix::from_fn(20, 30, |_, _| rng.random_range(-1.0..1.0));
        let cov = matmul_transa(&x, &x).unwrap().scale(1.0 / 20.0);
        let e = sym_eig(&cov).unwrap();
        assert!(e.eigenvalues.iter().all(|&l| l >= -1e-10));
        assert!(e.eigenvalues[20..].iter().all(|l| l.abs() < 1e-10));
    }

    #[test]
    fn decomposition_is_deterministic_with_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_symmetric(12, &mut rng);
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1, e2);
        for i in 0..12 {
            let first = e1.eigenvector(i).into_iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn matmul_hand_cases() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[2.0, 4.0]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
        assert!(matches!(matmul(&b, &b), Err(Error::Precondition(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseMatrix::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
        let b = DenseMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(
            matmul_transb(&a, &b.transpose()).unwrap(),
            naive_matmul(&a, &b)
        );
        assert_eq!(
            matmul_transa(&a.transpose(), &b).unwrap(),
            naive_matmul(&a, &b)
        );
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn eig_invariants_hold(n in 1usize..24, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_symmetric(n, &mut rng);
            let e = sym_eig(&a).unwrap();
            let rel = e.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            prop_assert!(rel <= 1e-8);
            prop_assert!(orthonormality_error(&e.eigenvectors) <= 1e-10);
            prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
