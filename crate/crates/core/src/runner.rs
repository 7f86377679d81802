//! Experiment orchestration: runs a method variant over a task stream, keeps
//! the accuracy matrix, and writes every artifact to an output directory.
//!
//! Output layout (all task numbers 1-based):
//!
//! ```text
//! config.snapshot          configuration text the run was started with, verbatim
//! resolved_config.toml     canonical form of the configuration actually run
//! matrix.csv               after_task,task,accuracy
//! metrics.json             MetricReport
//! sweep_task<t>.csv        beta,task_id,accuracy (t >= 2, when sweeping)
//! train_log.csv            run_id,task,track,epoch,loss,acc
//! timings.json             wall-clock seconds per stage
//! checkpoints/task<t>.json fused network, track endpoints, covariances, projector
//! COMPLETE | FAILED        completion marker (config hash) or failing stage
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connector::{interpolate, scan_path, PathScan};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, joint_oracle, AccuracyMatrix, MetricReport};
use crate::model::{ArchSpec, Network};
use crate::nullspace::{accumulate_covariance, build_projector, merge_all, LayerCovariance, Projector};
use crate::numerics::DenseMatrix;
use crate::taskgen::{make_stream, HeldOutTask, Samples, StreamSpec, TaskStream};
use crate::training::{train_finetune, train_first_task, train_task_dual, EpochLog, TrainConfig, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dual-track training fused with `β = 1/t`.
    Connector,
    /// `β = 0`: the projected stable track alone.
    StabilityOnly,
    /// `β = 1`: the distilled plastic track alone.
    PlasticityOnly,
    /// Dual-track training fused with the configured `beta`.
    FixedBeta,
    /// Unconstrained cross-entropy training on each task in turn.
    NaiveFinetune,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Connector,
        Variant::StabilityOnly,
        Variant::PlasticityOnly,
        Variant::FixedBeta,
        Variant::NaiveFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Connector => "connector",
            Variant::StabilityOnly => "stability-only",
            Variant::PlasticityOnly => "plasticity-only",
            Variant::FixedBeta => "fixed-beta",
            Variant::NaiveFinetune => "naive-finetune",
        }
    }

    fn uses_tracks(self) -> bool {
        self != Variant::NaiveFinetune
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Which joint-training references to compute for intransigence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointOracleMode {
    /// Every task `k`.
    All,
    /// Only the final task.
    Last,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    /// β grid points per scan; 0 disables scanning.
    pub grid_size: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { grid_size: 0 }
    }
}

/// Everything a run depends on. Loaded from TOML; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub variant: Variant,
    /// Fusion coefficient for `fixed-beta`; must be absent for every other variant.
    pub beta: Option<f64>,
    /// Seeds for multi-seed runs. Each seed replaces both `stream.seed` and `train.seed`.
    pub seeds: Vec<u64>,
    pub joint_oracle: JointOracleMode,
    /// Where artifacts go; no files are written when absent.
    pub output_dir: Option<PathBuf>,
    pub stream: StreamSpec,
    pub train: TrainConfig,
    pub model: ArchSpec,
    pub sweep: SweepSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            variant: Variant::Connector,
            beta: None,
            seeds: Vec::new(),
            joint_oracle: JointOracleMode::All,
            output_dir: None,
            stream: StreamSpec::default(),
            train: TrainConfig::default(),
            model: ArchSpec::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical TOML text; parsing it yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, returning the parsed config and its exact text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml_str(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        ensure!(!self.run_id.is_empty(), "run_id must not be empty");
        ensure!(
            self.model.input_dim() == self.stream.input_dim,
            "model input width {} does not match stream input_dim {}",
            self.model.input_dim(),
            self.stream.input_dim
        );
        match (self.variant, self.beta) {
            (Variant::FixedBeta, Some(b)) => {
                ensure!((0.0..=1.0).contains(&b), "beta must lie in [0, 1], got {b}")
            }
            (Variant::FixedBeta, None) => {
                return Err(Error::Config("fixed-beta needs a beta value".into()))
            }
            (v, Some(_)) => {
                return Err(Error::Config(format!(
                    "a beta override is only allowed with fixed-beta, not {v}"
                )))
            }
            _ => {}
        }
        ensure!(
            self.sweep.grid_size != 1,
            "sweep grid needs at least 2 points"
        );
        Ok(())
    }

    /// Copy with `seed` driving both data generation and training.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.stream.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Hex SHA-256 of the canonical TOML, used to recognize finished runs.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The fusion coefficient for task `t` (1-based, `t >= 2`).
    pub fn beta_for(&self, t: usize) -> f64 {
        match self.variant {
            Variant::Connector => 1.0 / t as f64,
            Variant::StabilityOnly => 0.0,
            Variant::PlasticityOnly => 1.0,
            Variant::FixedBeta => self.beta.unwrap_or(0.0),
            Variant::NaiveFinetune => 1.0,
        }
    }
}

/// Callbacks into a running experiment. Task ids are 0-based.
pub trait RunObserver {
    /// Before dual-track training of task `task >= 1`, with the merged covariance
    /// of all earlier tasks and the projector built from it.
    fn on_task_start(&mut self, _task: usize, _covariance: &[LayerCovariance], _projector: &Projector) {}

    /// After every stable-track optimizer step.
    fn on_stable_step(&mut self, _task: usize, _step: usize, _applied: &[DenseMatrix]) {}

    /// After task `task` is trained, evaluated and summarized, once its training
    /// data has been released.
    fn on_task_complete(&mut self, _task: usize) {}
}

impl RunObserver for () {}

struct StepForwarder<'a> {
    task: usize,
    inner: &'a mut dyn RunObserver,
}

impl TrainObserver for StepForwarder<'_> {
    fn on_stable_step(&mut self, step: usize, applied: &[DenseMatrix]) {
        self.inner.on_stable_step(self.task, step, applied);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Saved state after one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 1-based.
    pub task: usize,
    pub fused: Network,
    pub stable: Option<Network>,
    pub plastic: Option<Network>,
    pub covariance: Vec<LayerCovariance>,
    pub projector: Option<Projector>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_snapshot: String,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricReport,
    /// One scan per task `t >= 2` when sweeping.
    pub scans: Vec<PathScan>,
    pub final_network: Network,
    pub checkpoints: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
    /// True when the record was loaded from a finished output directory.
    pub resumed: bool,
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct LogRow<'a> {
    run_id: &'a str,
    task: usize,
    track: &'static str,
    epoch: usize,
    loss: f64,
    acc: f64,
}

/// Configures and launches one run.
pub struct Experiment<'a> {
    cfg: ExperimentConfig,
    snapshot: Option<String>,
    stream: Option<TaskStream>,
    observer: Option<&'a mut dyn RunObserver>,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            snapshot: None,
            stream: None,
            observer: None,
        }
    }

    /// Text stored verbatim as `config.snapshot`; defaults to the canonical TOML.
    pub fn snapshot(mut self, text: impl Into<String>) -> Self {
        self.snapshot = Some(text.into());
        self
    }

    /// Runs on a prepared stream instead of generating one from `cfg.stream`.
    /// The stream is consumed task by task.
    pub fn stream(mut self, stream: TaskStream) -> Self {
        self.stream = Some(stream);
        self
    }

    pub fn observer(mut self, observer: &'a mut dyn RunObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn run(self) -> Result<RunRecord> {
        let Experiment {
            cfg,
            snapshot,
            stream,
            observer,
        } = self;
        cfg.validate().map_err(|e| e.in_stage("config"))?;
        let snapshot = match snapshot {
            Some(s) => s,
            None => cfg.to_toml().map_err(|e| e.in_stage("config"))?,
        };
        let hash = cfg.hash().map_err(|e| e.in_stage("config"))?;
        let mut unit = ();
        let observer: &mut dyn RunObserver = match observer {
            Some(o) => o,
            None => &mut unit,
        };

        let out = cfg.output_dir.clone();
        if let Some(dir) = &out {
            if let Some(done) = read_marker(dir)? {
                if done == hash {
                    return load_record(dir).map_err(|e| e.in_stage("resume"));
                }
                return Err(Error::Config(format!(
                    "{} holds a finished run with a different configuration",
                    dir.display()
                ))
                .in_stage("resume"));
            }
            prepare_dir(dir, &snapshot, &cfg).map_err(|e| e.in_stage("prepare-output"))?;
        }

        let mut state = RunState::new(&cfg, out.as_deref());
        let result = state.execute(stream, snapshot, observer);
        match (&result, &out) {
            (Ok(_), Some(dir)) => {
                write_file(&dir.join("COMPLETE"), format!("{hash}\n").as_bytes())?;
            }
            (Err(e), Some(dir)) => {
                let stage = match e {
                    Error::Stage { stage, .. } => stage.as_str(),
                    _ => "unknown",
                };
                // Best effort: the original error matters more than a marker failure.
                let _ = fs::remove_file(dir.join("COMPLETE"));
                let _ = fs::write(dir.join("FAILED"), format!("stage={stage}\nerror={e}\n"));
                let _ = state.flush_partial();
            }
            _ => {}
        }
        result
    }
}

/// Runs `cfg` with the canonical snapshot and no observer.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    Experiment::new(cfg.clone()).run()
}

/// Runs the connector with a β scan of `grid_size` points after every task
/// `t >= 2`. Fusion still uses `β = 1/t`.
pub fn run_sweep(cfg: &ExperimentConfig, grid_size: usize) -> Result<Vec<PathScan>> {
    ensure!(
        cfg.variant == Variant::Connector,
        "sweeps run on the connector variant, not {}",
        cfg.variant
    );
    let mut c = cfg.clone();
    c.sweep.grid_size = grid_size;
    Ok(run_experiment(&c)?.scans)
}

struct RunState<'c> {
    cfg: &'c ExperimentConfig,
    out: Option<&'c Path>,
    matrix: AccuracyMatrix,
    scans: Vec<PathScan>,
    timings: Vec<StageTiming>,
    checkpoints: Vec<PathBuf>,
    log: Vec<(usize, &'static str, EpochLog)>,
}

impl<'c> RunState<'c> {
    fn new(cfg: &'c ExperimentConfig, out: Option<&'c Path>) -> Self {
        Self {
            cfg,
            out,
            matrix: AccuracyMatrix::new(cfg.stream.num_tasks),
            scans: Vec::new(),
            timings: Vec::new(),
            checkpoints: Vec::new(),
            log: Vec::new(),
        }
    }

    fn stage<T>(&mut self, name: String, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f(self).map_err(|e| e.in_stage(name.clone()));
        self.timings.push(StageTiming {
            stage: name,
            seconds: start.elapsed().as_secs_f64(),
        });
        r
    }

    fn execute(
        &mut self,
        stream: Option<TaskStream>,
        snapshot: String,
        observer: &mut dyn RunObserver,
    ) -> Result<RunRecord> {
        let cfg = self.cfg;
        let stream = match stream {
            Some(s) => {
                self.stage("load-stream".into(), |_| {
                    s.validate()?;
                    ensure!(
                        s.spec == cfg.stream,
                        "supplied stream was not generated from the configured stream spec"
                    );
                    Ok(s)
                })?
            }
            None => self.stage("generate-stream".into(), |_| make_stream(&cfg.stream))?,
        };
        let k_total = stream.num_tasks();

        // The joint references train on pooled data by design. They finish, and
        // release everything they touched, before the continual run begins.
        let a_star = self.stage("joint-oracle".into(), |_| joint_references(cfg, &stream))?;

        let mut held: Vec<HeldOutTask> = Vec::with_capacity(k_total);
        let mut fused: Option<Network> = None;
        let mut covariance: Vec<LayerCovariance> = Vec::new();

        for task in stream.tasks {
            let t = task.meta.task_id;
            let (train, held_out) = task.into_parts();
            held.push(held_out);
            let meta = held[t].meta.clone();

            let (net, stable, plastic) = if t == 0 {
                let net = self.stage(format!("task{}:train", t + 1), |s| {
                    let init = Network::new(&cfg.model, meta.num_classes(), cfg.train.seed)?;
                    let (net, hist) = train_first_task(init, &meta, &train, &cfg.train)?;
                    s.push_log(t, "first", hist);
                    Ok(net)
                })?;
                (net, None, None)
            } else {
                let prev = fused.take().expect("a network exists after the first task");
                if cfg.variant.uses_tracks() {
                    let projector = self.stage(format!("task{}:projector", t + 1), |_| {
                        build_projector(&covariance, cfg.train.eps_rel)
                    })?;
                    observer.on_task_start(t, &covariance, &projector);
                    let dual = self.stage(format!("task{}:train", t + 1), |s| {
                        let mut fwd = StepForwarder {
                            task: t,
                            inner: &mut *observer,
                        };
                        let r = train_task_dual(&prev, &projector, &meta, &train, &cfg.train, &mut fwd)?;
                        s.push_log(t, "stable", r.stable_history.clone());
                        s.push_log(t, "plastic", r.plastic_history.clone());
                        Ok(r)
                    })?;
                    if cfg.sweep.grid_size >= 2 {
                        let scan = self.stage(format!("task{}:sweep", t + 1), |_| {
                            scan_path(&dual.stable, &dual.plastic, cfg.sweep.grid_size, &held)
                        })?;
                        self.scans.push(scan);
                    }
                    let net = self.stage(format!("task{}:fuse", t + 1), |_| {
                        interpolate(&dual.stable, &dual.plastic, cfg.beta_for(t + 1))
                    })?;
                    (net, Some(dual.stable), Some(dual.plastic))
                } else {
                    let net = self.stage(format!("task{}:train", t + 1), |s| {
                        let (net, hist) = train_finetune(&prev, &meta, &train, &cfg.train)?;
                        s.push_log(t, "finetune", hist);
                        Ok(net)
                    })?;
                    (net, None, None)
                }
            };

            self.stage(format!("task{}:evaluate", t + 1), |s| {
                let row = held.iter().map(|h| evaluate(&net, h)).collect::<Result<Vec<_>>>()?;
                s.matrix.record_row(t, row)
            })?;

            if cfg.variant.uses_tracks() {
                covariance = self.stage(format!("task{}:covariance", t + 1), |_| {
                    update_covariance(&covariance, &net, &train)
                })?;
            }
            // Last owner of this task's training samples.
            drop(train);

            self.stage(format!("task{}:checkpoint", t + 1), |s| {
                s.write_matrix()?;
                let projector = if cfg.variant.uses_tracks() && t + 1 < k_total {
                    Some(build_projector(&covariance, cfg.train.eps_rel)?)
                } else {
                    None
                };
                s.write_checkpoint(Checkpoint {
                    task: t + 1,
                    fused: net.clone(),
                    stable,
                    plastic,
                    covariance: covariance.clone(),
                    projector,
                })
            })?;
            fused = Some(net);
            observer.on_task_complete(t);
        }

        let metrics = self.stage("metrics".into(), |s| MetricReport::from_matrix(&s.matrix, &a_star))?;
        self.stage("write-artifacts".into(), |s| s.write_final(&metrics))?;
        Ok(RunRecord {
            config: cfg.clone(),
            config_snapshot: snapshot,
            matrix: self.matrix.clone(),
            metrics,
            scans: self.scans.clone(),
            final_network: fused.expect("stream has at least one task"),
            checkpoints: self.checkpoints.clone(),
            timings: self.timings.clone(),
            resumed: false,
        })
    }

    fn push_log(&mut self, task: usize, track: &'static str, hist: Vec<EpochLog>) {
        self.log.extend(hist.into_iter().map(|h| (task, track, h)));
    }

    fn write_matrix(&self) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let mut buf = Vec::new();
        self.matrix
            .write_csv(&mut buf)
            .map_err(|e| Error::io(dir.join("matrix.csv"), e))?;
        write_file(&dir.join("matrix.csv"), &buf)
    }

    fn write_checkpoint(&mut self, ck: Checkpoint) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let path = dir.join("checkpoints").join(format!("task{}.json", ck.task));
        write_file(&path, serde_json::to_string(&ck)?.as_bytes())?;
        self.checkpoints.push(path);
        Ok(())
    }

    fn write_log(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (task, track, h) in &self.log {
            w.serialize(LogRow {
                run_id: &self.cfg.run_id,
                task: task + 1,
                track,
                epoch: h.epoch,
                loss: h.loss,
                acc: h.acc,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(dir.join("train_log.csv"), e.into_error()))?;
        write_file(&dir.join("train_log.csv"), &bytes)
    }

    fn write_final(&self, metrics: &MetricReport) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        write_file(
            &dir.join("metrics.json"),
            serde_json::to_string_pretty(metrics)?.as_bytes(),
        )?;
        for scan in &self.scans {
            write_scan(dir, scan)?;
        }
        self.write_log(dir)?;
        write_file(
            &dir.join("timings.json"),
            serde_json::to_string_pretty(&self.timings)?.as_bytes(),
        )
    }

    /// Writes whatever is known after a failure.
    fn flush_partial(&self) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        self.write_matrix()?;
        for scan in &self.scans {
            write_scan(dir, scan)?;
        }
        self.write_log(dir)
    }
}

fn write_scan(dir: &Path, scan: &PathScan) -> Result<()> {
    let t = scan.task_count();
    let path = dir.join(format!("sweep_task{t}.csv"));
    let mut buf = Vec::new();
    scan.write_csv(&mut buf).map_err(|e| Error::io(&path, e))?;
    write_file(&path, &buf)
}

fn joint_references(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<Vec<Option<f64>>> {
    let k = stream.num_tasks();
    let wanted: Vec<usize> = match cfg.joint_oracle {
        JointOracleMode::All => (1..=k).collect(),
        JointOracleMode::Last => vec![k],
        JointOracleMode::None => Vec::new(),
    };
    let values = wanted
        .par_iter()
        .map(|&j| joint_oracle(stream, &cfg.model, j, &cfg.train))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![None; k];
    for (j, v) in wanted.into_iter().zip(values) {
        out[j - 1] = Some(v);
    }
    Ok(out)
}

fn update_covariance(prev: &[LayerCovariance], net: &Network, train: &Arc<Samples>) -> Result<Vec<LayerCovariance>> {
    let fresh = accumulate_covariance(net, &train.inputs)?;
    if prev.is_empty() {
        Ok(fresh)
    } else {
        merge_all(prev, &fresh)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_marker(dir: &Path) -> Result<Option<String>> {
    let path = dir.join("COMPLETE");
    match fs::read_to_string(&path) {
        Ok(s) => Ok(Some(s.trim().to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn prepare_dir(dir: &Path, snapshot: &str, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    write_file(&dir.join("config.snapshot"), snapshot.as_bytes())?;
    write_file(&dir.join("resolved_config.toml"), cfg.to_toml()?.as_bytes())
}

fn read_config(dir: &Path) -> Result<(ExperimentConfig, String)> {
    let resolved = dir.join("resolved_config.toml");
    let text = fs::read_to_string(&resolved).map_err(|e| Error::io(&resolved, e))?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    let snap_path = dir.join("config.snapshot");
    let snapshot = fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
    Ok((config, snapshot))
}

/// Loads a finished run from its output directory.
pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let (config, snapshot) = read_config(dir)?;
    let metrics = read_metrics(dir)?;
    let matrix = read_matrix(dir, config.stream.num_tasks)?;
    ensure!(
        matrix.rows == metrics.matrix,
        "matrix.csv and metrics.json disagree"
    );
    let mut scans = Vec::new();
    for t in 2..=config.stream.num_tasks {
        let path = dir.join(format!("sweep_task{t}.csv"));
        if path.exists() {
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            scans.push(PathScan::read_csv(f)?);
        }
    }
    let checkpoints: Vec<PathBuf> = (1..=config.stream.num_tasks)
        .map(|t| dir.join("checkpoints").join(format!("task{t}.json")))
        .collect();
    let last = checkpoints.last().expect("at least one task");
    let final_network = Checkpoint::load(last)?.fused;
    let timings_path = dir.join("timings.json");
    let timings = match fs::read_to_string(&timings_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Vec::new(),
    };
    Ok(RunRecord {
        config,
        config_snapshot: snapshot,
        matrix,
        metrics,
        scans,
        final_network,
        checkpoints,
        timings,
        resumed: true,
    })
}

fn read_matrix(dir: &Path, num_tasks: usize) -> Result<AccuracyMatrix> {
    let path = dir.join("matrix.csv");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    AccuracyMatrix::read_csv(num_tasks, f)
}

fn read_metrics(dir: &Path) -> Result<MetricReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recomputes ACC, BWT and intransigence from `matrix.csv` and the joint
/// references stored in `metrics.json`, rewriting `metrics.json`.
pub fn recompute_metrics(dir: &Path) -> Result<MetricReport> {
    let (config, _) = read_config(dir)?;
    let matrix = read_matrix(dir, config.stream.num_tasks)?;
    let a_star = match read_metrics(dir) {
        Ok(m) => m.a_star,
        Err(_) => Vec::new(),
    };
    let report = MetricReport::from_matrix(&matrix, &a_star)?;
    write_file(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Config(format!("unknown export format {other:?}"))),
        }
    }
}

/// Writes `metrics.<ext>` and `matrix.<ext>` (plus `sweeps.json` for JSON) into
/// the record directory and returns the paths written.
pub fn export_record(dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    let record = load_record(dir)?;
    let mut written = Vec::new();
    match format {
        ExportFormat::Csv => {
            let mut buf = Vec::new();
            record
                .metrics
                .write_csv(&mut buf)
                .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
            write_file(&dir.join("metrics.csv"), &buf)?;
            written.push(dir.join("metrics.csv"));
            // matrix.csv already exists in this format.
            written.push(dir.join("matrix.csv"));
            written.extend(record.scans.iter().map(|s| dir.join(format!("sweep_task{}.csv", s.task_count()))));
        }
        ExportFormat::Json => {
            for (name, text) in [
                ("metrics.json", serde_json::to_string_pretty(&record.metrics)?),
                ("matrix.json", serde_json::to_string_pretty(&record.matrix)?),
                ("sweeps.json", serde_json::to_string_pretty(&record.scans)?),
            ] {
                write_file(&dir.join(name), text.as_bytes())?;
                written.push(dir.join(name));
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub acc: Stat,
    pub bwt: Option<Stat>,
    /// Intransigence on the final task.
    pub im: Option<Stat>,
}

/// Runs every seed in `cfg.seeds` in parallel. Each seed writes to
/// `<output_dir>/seed-<s>`, and `<output_dir>/aggregate.json` holds the summary.
/// `snapshot`, when given, is stored verbatim as every seed's `config.snapshot`.
pub fn run_seeds(cfg: &ExperimentConfig, snapshot: Option<&str>) -> Result<(Vec<RunRecord>, SeedSummary)> {
    ensure!(!cfg.seeds.is_empty(), "seed list is empty");
    let records = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.with_seed(s);
            c.seeds = Vec::new();
            c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("seed-{s}")));
            match snapshot {
                Some(text) => Experiment::new(c).snapshot(text).run(),
                None => run_experiment(&c),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let collect = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<Stat> {
        let v: Option<Vec<f64>> = records.iter().map(|r| f(&r.metrics)).collect();
        v.and_then(|v| Stat::of(&v))
    };
    let summary = SeedSummary {
        seeds: cfg.seeds.clone(),
        acc: collect(&|m| Some(m.acc)).expect("at least one seed"),
        bwt: collect(&|m| m.bwt),
        im: collect(&|m| m.final_im()),
    };
    if let Some(dir) = &cfg.output_dir {
        write_file(
            &dir.join("aggregate.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )
        .map_err(|e| e.in_stage("aggregate"))?;
    }
    Ok((records, summary))
}
