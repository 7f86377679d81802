//! Synthetic incremental-learning streams with disjoint, contiguous class splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{derive, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Isotropic Gaussian blob per class, means on a radius-3 hypersphere.
    Gaussian,
    /// Concentric rings in a random plane: class pairs share a center and differ in radius.
    TwoRings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub generator: GeneratorKind,
    pub num_classes: usize,
    pub num_tasks: usize,
    pub input_dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Gaussian,
            num_classes: 10,
            num_tasks: 5,
            input_dim: 16,
            per_class_train: 200,
            per_class_test: 100,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_tasks > 0, "need at least one task");
        ensure!(
            self.num_classes % self.num_tasks == 0 && self.num_classes >= self.num_tasks,
            "{} tasks do not evenly divide {} classes",
            self.num_tasks,
            self.num_classes
        );
        ensure!(self.input_dim > 0, "input_dim must be positive");
        ensure!(
            self.per_class_train > 0 && self.per_class_test > 0,
            "per-class sample counts must be positive"
        );
        if self.generator == GeneratorKind::TwoRings {
            ensure!(self.input_dim >= 2, "two-rings needs input_dim >= 2");
        }
        Ok(())
    }

    pub fn classes_per_task(&self) -> usize {
        self.num_classes / self.num_tasks
    }
}

/// Inputs (one sample per row) and their global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMeta {
    pub task_id: usize,
    /// Global labels owned by this task; head output `i` predicts `class_ids[i]`.
    pub class_ids: Vec<usize>,
}

impl TaskMeta {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == global)
    }

    pub fn local_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&y| {
                self.local_label(y).ok_or_else(|| {
                    Error::precondition(format!(
                        "label {y} is not owned by task {}",
                        self.task_id
                    ))
                })
            })
            .collect()
    }
}

/// A task's test split, the only per-task data that outlives its training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutTask {
    pub meta: TaskMeta,
    pub test: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub meta: TaskMeta,
    /// Shared so that the runner can prove it released the last reference.
    pub train: Arc<Samples>,
    pub test: Samples,
}

impl TaskDataset {
    pub fn held_out(&self) -> HeldOutTask {
        HeldOutTask {
            meta: self.meta.clone(),
            test: self.test.clone(),
        }
    }

    pub fn into_parts(self) -> (Arc<Samples>, HeldOutTask) {
        (
            self.train,
            HeldOutTask {
                meta: self.meta,
                test: self.test,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub tasks: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Checks the split invariants: disjoint contiguous class ownership, labels
    /// inside their task, consistent widths.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ensure!(
            self.tasks.len() == self.spec.num_tasks,
            "stream has {} tasks, spec says {}",
            self.tasks.len(),
            self.spec.num_tasks
        );
        let per = self.spec.classes_per_task();
        let mut seen = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            ensure!(task.meta.task_id == t, "task ids must be 0..K in order");
            ensure!(
                task.meta.class_ids == (t * per..(t + 1) * per).collect::<Vec<_>>(),
                "task {t} does not own classes {}..{}",
                t * per,
                (t + 1) * per
            );
            for &c in &task.meta.class_ids {
                ensure!(seen.insert(c), "class {c} owned by two tasks");
            }
            for split in [task.train.as_ref(), &task.test] {
                ensure!(
                    split.inputs.cols() == self.spec.input_dim,
                    "task {t} has width {}",
                    split.inputs.cols()
                );
                ensure!(split.inputs.rows() == split.labels.len(), "row/label mismatch");
                ensure!(
                    split.labels.iter().all(|y| task.meta.class_ids.contains(y)),
                    "task {t} has a label outside its classes"
                );
            }
        }
        ensure!(
            seen == (0..self.spec.num_classes).collect(),
            "class union is not 0..C"
        );
        Ok(())
    }
}

/// Per-class isotropic Gaussian samples around a mean on a hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGenerator {
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Seeds the class means; shared by train and test draws.
    pub mean_seed: u64,
}

impl GaussianGenerator {
    pub fn new(dim: usize, mean_seed: u64) -> Self {
        Self {
            dim,
            radius: 3.0,
            sigma: 1.0,
            mean_seed,
        }
    }

    /// Uniform direction on the sphere, scaled to `radius`.
    pub fn class_mean(&self, class_id: usize) -> Vec<f64> {
        let mut rng = derive(self.mean_seed, streams::CLASS_MEAN + class_id as u64);
        sphere_point(self.dim, self.radius, &mut rng)
    }

    pub fn sample(&self, class_id: usize, n: usize, seed: u64) -> Result<DenseMatrix> {
        self.sample_around(&self.class_mean(class_id), n, seed)
    }

    /// Draws `n` points from `N(mean, σ² I)` using stream `seed`.
    pub fn sample_around(&self, mean: &[f64], n: usize, seed: u64) -> Result<DenseMatrix> {
        ensure!(n > 0, "sample count must be positive");
        ensure!(mean.len() == self.dim, "mean has wrong dimension");
        let mut rng = derive(seed, 0);
        Ok(DenseMatrix::from_fn(n, self.dim, |_, j| {
            mean[j] + self.sigma * rng.sample::<f64, _>(StandardNormal)
        }))
    }
}

/// Two concentric noisy rings per class pair in a random 2-D plane.
///
/// Class `c` belongs to pair `c / 2`; even classes sit on the inner ring
/// (radius 1), odd classes on the outer ring (radius 2.5). The pair shares a
/// center on the radius-3 hypersphere, so neither class is linearly separable
/// from the other in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoRingsGenerator {
    pub dim: usize,
    pub noise: f64,
    pub mean_seed: u64,
}

impl TwoRingsGenerator {
    pub fn new(dim: usize, mean_seed: u64) -> Self {
        Self {
            dim,
            noise: 0.15,
            mean_seed,
        }
    }

    pub fn ring_radius(class_id: usize) -> f64 {
        if class_id % 2 == 0 {
            1.0
        } else {
            2.5
        }
    }

    fn frame(&self, pair: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = derive(self.mean_seed, streams::RING_PLANE + pair as u64);
        let center = sphere_point(self.dim, 3.0, &mut rng);
        let u = sphere_point(self.dim, 1.0, &mut rng);
        let mut v = sphere_point(self.dim, 1.0, &mut rng);
        let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi -= proj * ui;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        (center, u, v)
    }

    pub fn sample(&self, class_id: usize, n: usize, seed: u64) -> Result<DenseMatrix> {
        ensure!(n > 0, "sample count must be positive");
        let (center, u, v) = self.frame(class_id / 2);
        let r = Self::ring_radius(class_id);
        let mut rng = derive(seed, 0);
        let mut out = DenseMatrix::zeros(n, self.dim);
        for i in 0..n {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for j in 0..self.dim {
                let noise: f64 = rng.sample(StandardNormal);
                out[(i, j)] = center[j] + r * (c * u[j] + s * v[j]) + self.noise * noise;
            }
        }
        Ok(out)
    }
}

fn sphere_point(dim: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| radius * x / norm).collect();
        }
    }
}

fn sample_seed(stream_seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    derive(stream_seed, stream).next_u64()
}

fn draw(spec: &StreamSpec, class_id: usize, n: usize, seed: u64) -> Result<DenseMatrix> {
    match spec.generator {
        GeneratorKind::Gaussian => {
            GaussianGenerator::new(spec.input_dim, spec.seed).sample(class_id, n, seed)
        }
        GeneratorKind::TwoRings => {
            TwoRingsGenerator::new(spec.input_dim, spec.seed).sample(class_id, n, seed)
        }
    }
}

/// Generates the full stream. Task `t` owns classes `t·C/K .. (t+1)·C/K − 1`.
pub fn make_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let per = spec.classes_per_task();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let class_ids: Vec<usize> = (t * per..(t + 1) * per).collect();
        let mut train_parts = Vec::new();
        let mut test_parts = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_labels = Vec::new();
        for &c in &class_ids {
            let train_seed = sample_seed(spec.seed, streams::TRAIN_SAMPLES + c as u64);
            let test_seed = sample_seed(spec.seed, streams::TEST_SAMPLES + c as u64);
            train_parts.push(draw(spec, c, spec.per_class_train, train_seed)?);
            test_parts.push(draw(spec, c, spec.per_class_test, test_seed)?);
            train_labels.extend(std::iter::repeat(c).take(spec.per_class_train));
            test_labels.extend(std::iter::repeat(c).take(spec.per_class_test));
        }
        let train_refs: Vec<&DenseMatrix> = train_parts.iter().collect();
        let test_refs: Vec<&DenseMatrix> = test_parts.iter().collect();
        tasks.push(TaskDataset {
            meta: TaskMeta { task_id: t, class_ids },
            train: Arc::new(Samples {
                inputs: DenseMatrix::vstack(&train_refs)?,
                labels: train_labels,
            }),
            test: Samples {
                inputs: DenseMatrix::vstack(&test_refs)?,
                labels: test_labels,
            },
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: StreamSpec,
    files: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    task_id: usize,
    class_ids: Vec<usize>,
    train: String,
    test: String,
}

const MANIFEST_FORMAT: &str = "task-stream/v1";

/// Writes `manifest.json` plus `task<t>_train.csv` / `task<t>_test.csv` per task.
/// CSV columns are `x0..x{d-1},label`.
pub fn export_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for task in &stream.tasks {
        let t = task.meta.task_id;
        let train = format!("task{t}_train.csv");
        let test = format!("task{t}_test.csv");
        write_samples(&dir.join(&train), &task.train)?;
        write_samples(&dir.join(&test), &task.test)?;
        files.push(ManifestEntry {
            task_id: t,
            class_ids: task.meta.class_ids.clone(),
            train,
            test,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: stream.spec.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn import_stream(dir: &Path) -> Result<TaskStream> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.format == MANIFEST_FORMAT,
        "unsupported stream format {}",
        manifest.format
    );
    let mut tasks = Vec::new();
    for entry in manifest.files {
        let train = read_samples(&dir.join(&entry.train), manifest.spec.input_dim)?;
        let test = read_samples(&dir.join(&entry.test), manifest.spec.input_dim)?;
        tasks.push(TaskDataset {
            meta: TaskMeta {
                task_id: entry.task_id,
                class_ids: entry.class_ids,
            },
            train: Arc::new(train),
            test,
        });
    }
    let stream = TaskStream {
        spec: manifest.spec,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

fn write_samples(path: &Path, samples: &Samples) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.inputs.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (i, y) in samples.labels.iter().enumerate() {
        let mut rec: Vec<String> = samples.inputs.row(i).iter().map(f64::to_string).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_samples(path: &Path, dim: usize) -> Result<Samples> {
    let mut r = csv::Reader::from_path(path)?;
    ensure!(
        r.headers()?.len() == dim + 1,
        "{} has {} columns, expected {}",
        path.display(),
        r.headers()?.len(),
        dim + 1
    );
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for j in 0..dim {
            data.push(rec[j].trim().parse::<f64>().map_err(|e| {
                Error::precondition(format!("{}: bad number {:?}: {e}", path.display(), &rec[j]))
            })?);
        }
        labels.push(rec[dim].trim().parse::<usize>().map_err(|e| {
            Error::precondition(format!("{}: bad label {:?}: {e}", path.display(), &rec[dim]))
        })?);
    }
    Ok(Samples {
        inputs: DenseMatrix::new(labels.len(), dim, data)?,
        labels,
    })
}
