//! Task-incremental accuracy, the accuracy matrix, and ACC / BWT / intransigence.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ArchSpec, Network};
use crate::taskgen::{HeldOutTask, TaskStream};
use crate::training::{accuracy_rows, train_joint, TrainConfig};

/// Fraction of test samples whose argmax logit under the task's own head is
/// the true class. Ties go to the lowest class index.
pub fn evaluate(net: &Network, task: &HeldOutTask) -> Result<f64> {
    ensure!(
        task.meta.task_id < net.head_count(),
        "network has no head for task {}",
        task.meta.task_id
    );
    let labels = task.meta.local_labels(&task.test.labels)?;
    let tasks = vec![task.meta.task_id; labels.len()];
    accuracy_rows(net, &task.test.inputs, &labels, &tasks)
}

/// Lower-triangular `A[m][t]`: accuracy on task `t` after training through task `m`
/// (both 0-based here). Rows are appended whole, in task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Records row `m` once task `m` has finished training. `accs[t]` is the
    /// accuracy on task `t ≤ m`.
    pub fn record_row(&mut self, m: usize, accs: Vec<f64>) -> Result<()> {
        ensure!(
            m == self.rows.len(),
            "row {m} written out of order; next row is {}",
            self.rows.len()
        );
        ensure!(m < self.num_tasks, "row {m} beyond {} tasks", self.num_tasks);
        ensure!(
            accs.len() == m + 1,
            "row {m} needs {} entries, got {}",
            m + 1,
            accs.len()
        );
        ensure!(
            accs.iter().all(|a| (0.0..=1.0).contains(a)),
            "accuracies must lie in [0, 1]"
        );
        self.rows.push(accs);
        Ok(())
    }

    pub fn get(&self, m: usize, t: usize) -> Option<f64> {
        self.rows.get(m).and_then(|r| r.get(t)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn final_row(&self) -> Result<&[f64]> {
        ensure!(
            self.is_complete(),
            "matrix has {} of {} rows",
            self.rows.len(),
            self.num_tasks
        );
        Ok(self.rows.last().map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Long-format CSV, header `after_task,task,accuracy`, 1-based task numbers.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "after_task,task,accuracy")?;
        for (m, row) in self.rows.iter().enumerate() {
            for (t, a) in row.iter().enumerate() {
                writeln!(w, "{},{},{a}", m + 1, t + 1)?;
            }
        }
        Ok(())
    }

    pub fn read_csv(num_tasks: usize, r: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut m = Self::new(num_tasks);
        let mut pending: Vec<f64> = Vec::new();
        let mut current = 1usize;
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::precondition(format!("bad matrix cell {:?}: {e}", &rec[i])))
            };
            let (after, task, acc) = (parse(0)? as usize, parse(1)? as usize, parse(2)?);
            if after != current {
                m.record_row(current - 1, std::mem::take(&mut pending))?;
                current = after;
            }
            ensure!(task == pending.len() + 1, "matrix cells out of order");
            pending.push(acc);
        }
        if !pending.is_empty() {
            m.record_row(current - 1, pending)?;
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    ensure!(!last.is_empty(), "empty accuracy matrix");
    Ok(last.iter().sum::<f64>() / m.num_tasks as f64)
}

/// Mean of `A[K][t] − A[t][t]` over the first `K − 1` tasks.
pub fn compute_bwt(m: &AccuracyMatrix) -> Result<f64> {
    ensure!(m.num_tasks >= 2, "backward transfer needs at least two tasks");
    let last = m.final_row()?;
    let k = m.num_tasks;
    let total: f64 = (0..k - 1).map(|t| last[t] - m.rows[t][t]).sum();
    Ok(total / (k - 1) as f64)
}

/// Intransigence `A*_k − A_{k,k}`; negative when the continual model beats the joint one.
pub fn compute_im(a_star: f64, a_kk: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&a_star) && (0.0..=1.0).contains(&a_kk),
        "accuracies must lie in [0, 1]"
    );
    Ok(a_star - a_kk)
}

/// Budget for the joint reference over `k` tasks: `epochs · k`, capped at three
/// single-task budgets.
pub fn joint_epochs(cfg: &TrainConfig, k: usize) -> usize {
    (cfg.epochs * k).min(3 * cfg.epochs)
}

/// Test accuracy on task `k` (1-based) of a fresh multi-head network trained on
/// the pooled training sets of tasks `1..=k`.
pub fn joint_oracle(stream: &TaskStream, arch: &ArchSpec, k: usize, cfg: &TrainConfig) -> Result<f64> {
    ensure!(
        (1..=stream.num_tasks()).contains(&k),
        "k = {k} outside 1..={}",
        stream.num_tasks()
    );
    let tasks = &stream.tasks[..k];
    let mut net = Network::new(arch, tasks[0].meta.num_classes(), cfg.seed)?;
    for t in &tasks[1..] {
        net.add_head(t.meta.num_classes(), cfg.seed)?;
    }
    let pooled: Vec<_> = tasks.iter().map(|t| (&t.meta, t.train.as_ref())).collect();
    let (net, _) = train_joint(net, &pooled, &cfg.rescaled(joint_epochs(cfg, k)))?;
    evaluate(&net, &tasks[k - 1].held_out())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    /// Absent for single-task streams.
    pub bwt: Option<f64>,
    /// `im[k]` is the intransigence on task `k`; `None` where no joint reference was trained.
    pub im: Vec<Option<f64>>,
    pub a_star: Vec<Option<f64>>,
    pub matrix: Vec<Vec<f64>>,
}

impl MetricReport {
    /// `a_star[k]` is the joint reference for task `k`. Missing or `None`
    /// entries leave that task's intransigence undefined.
    pub fn from_matrix(m: &AccuracyMatrix, a_star: &[Option<f64>]) -> Result<Self> {
        ensure!(
            a_star.len() <= m.num_tasks,
            "{} joint references for {} tasks",
            a_star.len(),
            m.num_tasks
        );
        let acc = compute_acc(m)?;
        let bwt = if m.num_tasks >= 2 {
            Some(compute_bwt(m)?)
        } else {
            None
        };
        let mut stars = a_star.to_vec();
        stars.resize(m.num_tasks, None);
        let im = stars
            .iter()
            .enumerate()
            .map(|(k, s)| s.map(|s| compute_im(s, m.rows[k][k])).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            acc,
            bwt,
            im,
            a_star: stars,
            matrix: m.rows.clone(),
        })
    }

    /// Intransigence on the last task, when its joint reference was computed.
    pub fn final_im(&self) -> Option<f64> {
        self.im.last().copied().flatten()
    }

    pub fn accuracy_matrix(&self) -> Result<AccuracyMatrix> {
        let mut m = AccuracyMatrix::new(self.matrix.len());
        for (i, row) in self.matrix.iter().enumerate() {
            m.record_row(i, row.clone())?;
        }
        Ok(m)
    }

    /// Two-column CSV `metric,value` with rows `acc`, `bwt`, `im[k]`, `a_star[k]`
    /// (1-based `k`, undefined entries omitted) and `matrix[m][t]`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "acc,{}", self.acc)?;
        if let Some(b) = self.bwt {
            writeln!(w, "bwt,{b}")?;
        }
        for (k, v) in self.im.iter().enumerate() {
            if let Some(v) = v {
                writeln!(w, "im[{}],{v}", k + 1)?;
            }
        }
        for (k, v) in self.a_star.iter().enumerate() {
            if let Some(v) = v {
                writeln!(w, "a_star[{}],{v}", k + 1)?;
            }
        }
        for (m, row) in self.matrix.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                writeln!(w, "matrix[{}][{}],{v}", m + 1, t + 1)?;
            }
        }
        Ok(())
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearLayer;
    use crate::numerics::DenseMatrix;
    use crate::taskgen::{Samples, TaskMeta};

    fn two_by_two() -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(2);
        m.record_row(0, vec![0.9]).unwrap();
        m.record_row(1, vec![0.8, 0.9]).unwrap();
        m
    }

    #[test]
    fn hand_metrics() {
        let m = two_by_two();
        // 0.85 itself is not reachable from the doubles 0.8 and 0.9; the
        // correctly rounded mean is one ulp above it.
        assert_eq!(compute_acc(&m).unwrap(), (0.8 + 0.9) / 2.0);
        assert!((compute_acc(&m).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(compute_bwt(&m).unwrap(), 0.8 - 0.9);
        assert!((compute_bwt(&m).unwrap() - -0.1).abs() < 1e-15);
        assert!((compute_im(0.9, 0.8).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(compute_im(0.5, 0.5).unwrap(), 0.0);
        assert!((compute_im(0.7, 0.8).unwrap() - -0.1).abs() < 1e-15);
        assert!(compute_im(1.2, 0.8).is_err());
    }

    #[test]
    fn constant_matrix_and_no_forgetting() {
        let mut m = AccuracyMatrix::new(3);
        for r in 0..3 {
            m.record_row(r, vec![0.7; r + 1]).unwrap();
        }
        assert!((compute_acc(&m).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(compute_bwt(&m).unwrap(), 0.0);
    }

    #[test]
    fn population_order_is_enforced() {
        let mut m = AccuracyMatrix::new(3);
        assert!(m.record_row(1, vec![0.5, 0.5]).is_err());
        m.record_row(0, vec![0.5]).unwrap();
        assert!(m.record_row(1, vec![0.5]).is_err());
        assert!(m.record_row(1, vec![0.5, 1.5]).is_err());
        assert!(compute_acc(&m).is_err());
        let single = {
            let mut s = AccuracyMatrix::new(1);
            s.record_row(0, vec![0.6]).unwrap();
            s
        };
        assert!(compute_bwt(&single).is_err());
        let r = MetricReport::from_matrix(&single, &[]).unwrap();
        assert_eq!(r.bwt, None);
    }

    #[test]
    fn report_keeps_task_positions() {
        let m = two_by_two();
        let r = MetricReport::from_matrix(&m, &[None, Some(0.95)]).unwrap();
        assert_eq!(r.im[0], None);
        assert!((r.final_im().unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(r.accuracy_matrix().unwrap(), m);
        let none = MetricReport::from_matrix(&m, &[]).unwrap();
        assert_eq!(none.im, vec![None, None]);
        assert_eq!(none.final_im(), None);
        assert!(MetricReport::from_matrix(&m, &[None; 3]).is_err());

        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("im[2],"));
        assert!(!text.contains("im[1],"));
        assert!(text.contains("matrix[2][1],0.8"));
    }

    #[test]
    fn csv_round_trip() {
        let m = two_by_two();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "after_task,task,accuracy\n1,1,0.9\n2,1,0.8\n2,2,0.9\n"
        );
        assert_eq!(AccuracyMatrix::read_csv(2, &buf[..]).unwrap(), m);
    }

    fn fixed_head_net(logit_rows: &[Vec<f64>]) -> (Network, HeldOutTask) {
        // Identity head over one-hot-free inputs: logits equal the inputs.
        let k = logit_rows[0].len();
        let head = LinearLayer::from_parts(&DenseMatrix::identity(k), &vec![0.0; k], false).unwrap();
        let net = Network::from_layers(ArchSpec::mlp(vec![k]), vec![], vec![head]).unwrap();
        let inputs = DenseMatrix::from_rows(logit_rows).unwrap();
        let task = HeldOutTask {
            meta: TaskMeta {
                task_id: 0,
                class_ids: (0..k).collect(),
            },
            test: Samples {
                inputs,
                labels: vec![],
            },
        };
        (net, task)
    }

    #[test]
    fn constant_prediction_on_balanced_task() {
        let (net, mut task) = fixed_head_net(&vec![vec![1.0, 0.0]; 4]);
        task.test.labels = vec![0, 1, 0, 1];
        assert_eq!(evaluate(&net, &task).unwrap(), 0.5);
        task.test.labels = vec![0; 4];
        assert_eq!(evaluate(&net, &task).unwrap(), 1.0);
    }

    #[test]
    fn three_class_hand_count() {
        let rows = vec![
            vec![0.1, 0.5, 0.2],  // 1
            vec![2.0, -1.0, 0.0], // 0
            vec![0.3, 0.3, 0.1],  // tie -> 0
            vec![0.0, 0.0, 0.9],  // 2
            vec![-1.0, 0.2, 0.1], // 1
            vec![0.5, 0.4, 0.6],  // 2
            vec![1.0, 1.0, 1.0],  // tie -> 0
            vec![0.2, 0.9, 0.9],  // tie -> 1
            vec![0.0, -0.5, -0.2], // 0
            vec![0.1, 0.2, 0.3],  // 2
        ];
        let labels = vec![1, 0, 1, 2, 0, 2, 0, 2, 0, 1];
        // hits: 1,1,0,1,0,1,1,0,1,0 = 6
        let (net, mut task) = fixed_head_net(&rows);
        task.test.labels = labels;
        assert!((evaluate(&net, &task).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn evaluate_needs_head() {
        let (net, mut task) = fixed_head_net(&[vec![1.0, 0.0]]);
        task.test.labels = vec![0];
        task.meta.task_id = 1;
        assert!(evaluate(&net, &task).is_err());
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&x, &[1.0; 4]), None);
        assert_eq!(ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn joint_epoch_cap() {
        let cfg = TrainConfig::default();
        assert_eq!(joint_epochs(&cfg, 1), 50);
        assert_eq!(joint_epochs(&cfg, 2), 100);
        assert_eq!(joint_epochs(&cfg, 5), 150);
    }
}
