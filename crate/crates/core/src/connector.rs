//! Linear paths between the two tracks, the `1/t` fusion rule, centroids, and
//! the β-sweep scanner.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evaluation::evaluate;
use crate::model::Network;
use crate::taskgen::HeldOutTask;

/// `(1 − β)·stable + β·plastic` on every parameter and normalization statistic.
/// The endpoints return exact copies.
pub fn interpolate(stable: &Network, plastic: &Network, beta: f64) -> Result<Network> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        "beta must lie in [0, 1], got {beta}"
    );
    ensure!(
        stable.congruent(plastic),
        "cannot interpolate networks with different architectures or head counts"
    );
    if beta == 0.0 {
        return Ok(stable.clone());
    }
    if beta == 1.0 {
        return Ok(plastic.clone());
    }
    stable.zip_map(plastic, |a, b| (1.0 - beta) * a + beta * b)
}

/// The connector weight for the `t`-th task (1-based): `β = 1/t`.
pub fn fusion_beta(t: usize) -> Result<f64> {
    ensure!(t >= 2, "fusion needs t >= 2, got {t}");
    Ok(1.0 / t as f64)
}

/// `((t−1)/t)·stable + (1/t)·plastic`.
pub fn fuse(stable: &Network, plastic: &Network, t: usize) -> Result<Network> {
    interpolate(stable, plastic, fusion_beta(t)?)
}

/// Coordinate-wise mean of congruent networks.
pub fn centroid(nets: &[Network]) -> Result<Network> {
    let (first, rest) = nets
        .split_first()
        .ok_or_else(|| Error::precondition("centroid of an empty set"))?;
    let mut sum = first.clone();
    for n in rest {
        sum = sum.zip_map(n, |a, b| a + b)?;
    }
    let k = nets.len() as f64;
    sum.zip_map(first, |s, _| s / k)
}

/// Test accuracies along the linear path, one row per β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScan {
    pub betas: Vec<f64>,
    /// `accuracy[i][j]`: accuracy at `betas[i]` on `task_ids[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub task_ids: Vec<usize>,
}

impl PathScan {
    pub fn task_count(&self) -> usize {
        self.task_ids.len()
    }

    /// Accuracy curve of one task (column `j`) across β.
    pub fn curve(&self, j: usize) -> Vec<f64> {
        self.accuracy.iter().map(|row| row[j]).collect()
    }

    /// Largest absolute accuracy change between adjacent grid points, any task.
    pub fn max_adjacent_jump(&self) -> f64 {
        (0..self.task_count())
            .flat_map(|j| {
                let c = self.curve(j);
                c.windows(2).map(|w| (w[1] - w[0]).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// CSV with header `beta,task_id,accuracy`; task ids are 1-based.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "beta,task_id,accuracy")?;
        for (beta, row) in self.betas.iter().zip(&self.accuracy) {
            for (t, acc) in self.task_ids.iter().zip(row) {
                writeln!(w, "{beta},{},{acc}", t + 1)?;
            }
        }
        Ok(())
    }

    /// Inverse of [`PathScan::write_csv`].
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut scan = PathScan {
            betas: Vec::new(),
            accuracy: Vec::new(),
            task_ids: Vec::new(),
        };
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse()
                    .map_err(|e| Error::precondition(format!("bad sweep cell {:?}: {e}", &rec[i])))
            };
            let (beta, task, acc) = (field(0)?, field(1)? as usize, field(2)?);
            ensure!(task >= 1, "task ids in sweep files start at 1");
            if scan.betas.last() != Some(&beta) {
                scan.betas.push(beta);
                scan.accuracy.push(Vec::new());
            }
            let row = scan.accuracy.last_mut().expect("row pushed above");
            if scan.betas.len() == 1 {
                scan.task_ids.push(task - 1);
            }
            ensure!(
                scan.task_ids.get(row.len()) == Some(&(task - 1)),
                "sweep rows are not in grid order"
            );
            row.push(acc);
        }
        ensure!(
            scan.accuracy.iter().all(|r| r.len() == scan.task_ids.len()),
            "ragged sweep file"
        );
        Ok(scan)
    }
}

/// Uniform grid on [0, 1] with both endpoints exact.
pub fn beta_grid(grid_size: usize) -> Result<Vec<f64>> {
    ensure!(grid_size >= 2, "grid needs at least 2 points");
    let last = (grid_size - 1) as f64;
    Ok((0..grid_size).map(|i| i as f64 / last).collect())
}

/// Evaluates every grid point's network on every task's test set with that
/// task's own head. Grid points are evaluated in parallel.
pub fn scan_path(
    stable: &Network,
    plastic: &Network,
    grid_size: usize,
    eval_tasks: &[HeldOutTask],
) -> Result<PathScan> {
    let betas = beta_grid(grid_size)?;
    let accuracy = betas
        .par_iter()
        .map(|&beta| {
            let net = interpolate(stable, plastic, beta)?;
            eval_tasks.iter().map(|t| evaluate(&net, t)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathScan {
        betas,
        accuracy,
        task_ids: eval_tasks.iter().map(|t| t.meta.task_id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, LinearLayer};
    use crate::numerics::DenseMatrix;
    use crate::taskgen::{make_stream, StreamSpec};

    fn scalar(v: f64) -> Network {
        let head = LinearLayer {
            params: DenseMatrix::new(1, 2, vec![v, 0.0]).unwrap(),
            relu: false,
        };
        Network::from_layers(ArchSpec::mlp(vec![1]), vec![], vec![head]).unwrap()
    }

    fn net(seed: u64) -> Network {
        let mut n = Network::new(&ArchSpec::mlp(vec![3, 5, 4]), 2, seed).unwrap();
        n.add_head(3, seed + 100).unwrap();
        n
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (a, b) = (net(1), net(2));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&scalar(0.0), &scalar(1.0), 0.5).unwrap();
        assert_eq!(mid.heads()[0].params[(0, 0)], 0.5);
    }

    #[test]
    fn interpolation_errors() {
        let a = net(1);
        assert!(interpolate(&a, &a, 1.5).is_err());
        assert!(interpolate(&a, &a, -0.1).is_err());
        let other = Network::new(&ArchSpec::mlp(vec![3, 5, 4]), 2, 1).unwrap();
        assert!(interpolate(&a, &other, 0.5).is_err());
    }

    #[test]
    fn fuse_uses_inverse_task_count() {
        assert_eq!(fusion_beta(2).unwrap(), 0.5);
        assert_eq!(fusion_beta(10).unwrap(), 0.1);
        assert!(fuse(&net(1), &net(2), 1).is_err());
        let (a, b) = (net(1), net(2));
        for t in 2..8 {
            assert_eq!(fuse(&a, &b, t).unwrap(), interpolate(&a, &b, 1.0 / t as f64).unwrap());
            let same = fuse(&a, &a, t).unwrap().flat_parameters();
            for (x, y) in same.iter().zip(a.flat_parameters()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalization_statistics_are_averaged() {
        let mut arch = ArchSpec::mlp(vec![2, 3]);
        arch.normalization = true;
        let a = Network::new(&arch, 2, 0).unwrap();
        let mut b = a.clone();
        b.update_norm_stats(&DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap())
            .unwrap();
        let mid = interpolate(&a, &b, 0.5).unwrap();
        let (sa, sb, sm) = (
            &a.norm_stats().unwrap()[0],
            &b.norm_stats().unwrap()[0],
            &mid.norm_stats().unwrap()[0],
        );
        for j in 0..3 {
            assert_eq!(sm.mean[j], 0.5 * sa.mean[j] + 0.5 * sb.mean[j]);
            assert_eq!(sm.var[j], 0.5 * sa.var[j] + 0.5 * sb.var[j]);
        }
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(centroid(&[net(3)]).unwrap(), net(3));
        let c = centroid(&[scalar(0.0), scalar(1.0), scalar(2.0)]).unwrap();
        assert_eq!(c.heads()[0].params[(0, 0)], 1.0);
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn grid_has_exact_endpoints() {
        let g = beta_grid(21).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[20], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(beta_grid(1).is_err());
    }

    #[test]
    fn degenerate_path_is_flat() {
        let s = make_stream(&StreamSpec {
            num_classes: 4,
            num_tasks: 2,
            input_dim: 3,
            per_class_train: 5,
            per_class_test: 10,
            ..StreamSpec::default()
        })
        .unwrap();
        let held: Vec<_> = s.tasks.iter().map(|t| t.held_out()).collect();
        let n = net(5);
        let scan = scan_path(&n, &n, 5, &held).unwrap();
        for j in 0..2 {
            let c = scan.curve(j);
            assert!(c.iter().all(|&x| x == c[0]));
        }
        assert_eq!(scan.max_adjacent_jump(), 0.0);

        let two = scan_path(&n, &net(6), 2, &held).unwrap();
        assert_eq!(two.betas, vec![0.0, 1.0]);
        assert_eq!(two.accuracy[0], held.iter().map(|t| evaluate(&n, t).unwrap()).collect::<Vec<_>>());

        let mut buf = Vec::new();
        two.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("beta,task_id,accuracy\n0,1,"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        assert_eq!(PathScan::read_csv(text.as_bytes()).unwrap(), two);
    }
}
