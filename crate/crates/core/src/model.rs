//! Feedforward network with a shared extractor and one linear head per task.
//!
//! Every layer stores its weights and bias in one `out × (in + 1)` matrix whose
//! last column is the bias. The same augmented layout is used for the feature
//! covariance and the null-space projector, so bias updates are projected
//! exactly like weight updates.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{matmul, matmul_transa, matmul_transb, DenseMatrix};
use crate::rng::{derive, streams};

const NORM_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// Layer widths of the extractor, input dimension first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub widths: Vec<usize>,
    /// ReLU after every extractor layer.
    #[serde(default = "default_true")]
    pub relu: bool,
    /// Running-statistics normalization of each extractor layer's pre-activation.
    #[serde(default)]
    pub normalization: bool,
}

fn default_true() -> bool {
    true
}

impl ArchSpec {
    pub fn mlp(widths: Vec<usize>) -> Self {
        Self {
            widths,
            relu: true,
            normalization: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.widths.is_empty(), "architecture needs an input width");
        ensure!(
            self.widths.iter().all(|&w| w > 0),
            "layer widths must be positive: {:?}",
            self.widths
        );
        Ok(())
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::mlp(vec![16, 64, 64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `out × (in + 1)`; column `in` is the bias.
    pub params: DenseMatrix,
    pub relu: bool,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, relu: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let params = DenseMatrix::from_fn(out_dim, in_dim + 1, |_, j| {
            if j == in_dim {
                0.0
            } else {
                rng.random_range(-bound..bound)
            }
        });
        Self { params, relu }
    }

    pub fn from_parts(weight: &DenseMatrix, bias: &[f64], relu: bool) -> Result<Self> {
        ensure!(weight.rows() == bias.len(), "bias length must equal out dim");
        let params = DenseMatrix::from_fn(weight.rows(), weight.cols() + 1, |i, j| {
            if j == weight.cols() {
                bias[i]
            } else {
                weight[(i, j)]
            }
        });
        Ok(Self { params, relu })
    }

    pub fn in_dim(&self) -> usize {
        self.params.cols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.params.rows()
    }

    /// `X Wᵀ + b` for a batch `X` (rows are samples).
    pub fn affine(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        ensure!(
            x.cols() == self.in_dim(),
            "layer expects width {}, got {}",
            self.in_dim(),
            x.cols()
        );
        matmul_transb(&x.augment_ones(), &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn fresh(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    fn inv_std(&self, j: usize) -> f64 {
        1.0 / (self.var[j] + NORM_EPS).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    arch: ArchSpec,
    extractor: Vec<LinearLayer>,
    heads: Vec<LinearLayer>,
    norm: Option<Vec<NormStats>>,
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each extractor layer, then the input to the head.
    pub layer_inputs: Vec<DenseMatrix>,
    pub features: DenseMatrix,
    pub logits: DenseMatrix,
    /// Post-normalization, pre-ReLU output of each extractor layer.
    pub pre_activations: Vec<DenseMatrix>,
}

/// Per-tensor gradients: every extractor layer plus the heads that received signal.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub extractor: Vec<DenseMatrix>,
    pub heads: BTreeMap<usize, DenseMatrix>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.extractor.iter().all(DenseMatrix::is_finite)
            && self.heads.values().all(DenseMatrix::is_finite)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.extractor
            .iter()
            .chain(self.heads.values())
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Feature-distillation term: `weight · mean_i ‖f_i − reference_i‖²`.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub reference: &'a DenseMatrix,
    pub weight: f64,
}

/// Which loss `backward` differentiates. Losses are mean-reduced over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub cross_entropy: bool,
    pub distill: Option<Distillation<'a>>,
}

impl<'a> LossSpec<'a> {
    pub const CROSS_ENTROPY: LossSpec<'static> = LossSpec {
        cross_entropy: true,
        distill: None,
    };

    pub fn with_distillation(reference: &'a DenseMatrix, weight: f64) -> Self {
        Self {
            cross_entropy: true,
            distill: Some(Distillation { reference, weight }),
        }
    }

    pub fn distillation_only(reference: &'a DenseMatrix, weight: f64) -> Self {
        Self {
            cross_entropy: false,
            distill: Some(Distillation { reference, weight }),
        }
    }
}

impl Network {
    /// Fresh network with a single head of `classes` outputs.
    ///
    /// Extractor weights come from stream `EXTRACTOR_INIT` and head `t` from
    /// stream `HEAD_INIT + t` of `seed`, so `add_head` with the same seed
    /// reproduces what a joint multi-head initialization would draw.
    pub fn new(arch: &ArchSpec, classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        ensure!(classes > 0, "head needs at least one class");
        let mut rng = derive(seed, streams::EXTRACTOR_INIT);
        let extractor = arch
            .widths
            .windows(2)
            .map(|w| LinearLayer::glorot(w[0], w[1], arch.relu, &mut rng))
            .collect();
        let norm = arch.normalization.then(|| {
            arch.widths[1..]
                .iter()
                .map(|&w| NormStats::fresh(w))
                .collect()
        });
        let mut net = Self {
            arch: arch.clone(),
            extractor,
            heads: Vec::new(),
            norm,
        };
        net.add_head(classes, seed)?;
        Ok(net)
    }

    /// Assembles a network from explicit layers.
    pub fn from_layers(
        arch: ArchSpec,
        extractor: Vec<LinearLayer>,
        heads: Vec<LinearLayer>,
    ) -> Result<Self> {
        arch.validate()?;
        ensure!(
            extractor.len() + 1 == arch.widths.len(),
            "extractor depth does not match widths"
        );
        for (layer, w) in extractor.iter().zip(arch.widths.windows(2)) {
            ensure!(
                layer.in_dim() == w[0] && layer.out_dim() == w[1],
                "layer shape {}->{} does not match widths {:?}",
                layer.in_dim(),
                layer.out_dim(),
                w
            );
        }
        for head in &heads {
            ensure!(
                head.in_dim() == arch.feature_dim(),
                "head input must equal the feature width"
            );
        }
        let norm = arch.normalization.then(|| {
            arch.widths[1..]
                .iter()
                .map(|&w| NormStats::fresh(w))
                .collect()
        });
        Ok(Self {
            arch,
            extractor,
            heads,
            norm,
        })
    }

    /// Appends the head for task index `heads().len()`.
    pub fn add_head(&mut self, classes: usize, seed: u64) -> Result<usize> {
        ensure!(classes > 0, "head needs at least one class");
        let task = self.heads.len();
        let mut rng = derive(seed, streams::HEAD_INIT + task as u64);
        self.heads.push(LinearLayer::glorot(
            self.arch.feature_dim(),
            classes,
            false,
            &mut rng,
        ));
        Ok(task)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn extractor(&self) -> &[LinearLayer] {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.extractor
    }

    pub fn heads(&self) -> &[LinearLayer] {
        &self.heads
    }

    pub fn head_mut(&mut self, task: usize) -> Option<&mut LinearLayer> {
        self.heads.get_mut(task)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn norm_stats(&self) -> Option<&[NormStats]> {
        self.norm.as_deref()
    }

    /// Same architecture and head shapes.
    pub fn congruent(&self, other: &Network) -> bool {
        self.arch == other.arch
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|(a, b)| a.params.shape() == b.params.shape())
            && self.norm.is_some() == other.norm.is_some()
    }

    /// Every parameter, then every normalization statistic, in a fixed order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.extractor.iter().chain(&self.heads) {
            out.extend_from_slice(layer.params.as_slice());
        }
        if let Some(norm) = &self.norm {
            for s in norm {
                out.extend_from_slice(&s.mean);
                out.extend_from_slice(&s.var);
            }
        }
        out
    }

    /// Applies `f` coordinate-wise to two congruent networks, covering both
    /// parameters and normalization statistics.
    pub fn zip_map(&self, other: &Network, f: impl Fn(f64, f64) -> f64) -> Result<Network> {
        ensure!(
            self.congruent(other),
            "networks differ in architecture or head count"
        );
        let map_layers = |a: &[LinearLayer], b: &[LinearLayer]| -> Result<Vec<LinearLayer>> {
            a.iter()
                .zip(b)
                .map(|(la, lb)| {
                    Ok(LinearLayer {
                        params: la.params.zip_with(&lb.params, &f)?,
                        relu: la.relu,
                    })
                })
                .collect()
        };
        let norm = match (&self.norm, &other.norm) {
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(sa, sb)| NormStats {
                        mean: sa.mean.iter().zip(&sb.mean).map(|(&x, &y)| f(x, y)).collect(),
                        var: sa.var.iter().zip(&sb.var).map(|(&x, &y)| f(x, y)).collect(),
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok(Network {
            arch: self.arch.clone(),
            extractor: map_layers(&self.extractor, &other.extractor)?,
            heads: map_layers(&self.heads, &other.heads)?,
            norm,
        })
    }

    fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        ensure!(
            batch.cols() == self.arch.input_dim(),
            "batch width {} does not match input dimension {}",
            batch.cols(),
            self.arch.input_dim()
        );
        Ok(())
    }

    fn run_extractor(&self, batch: &DenseMatrix) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.extractor.len() + 1);
        let mut pre = Vec::with_capacity(self.extractor.len());
        let mut x = batch.clone();
        for (l, layer) in self.extractor.iter().enumerate() {
            let mut z = layer.affine(&x)?;
            if let Some(norm) = &self.norm {
                normalize_in_place(&mut z, &norm[l]);
            }
            let a = if layer.relu {
                DenseMatrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)].max(0.0))
            } else {
                z.clone()
            };
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        inputs.push(x);
        Ok((inputs, pre))
    }

    pub fn forward(&self, batch: &DenseMatrix, task: usize) -> Result<ForwardTrace> {
        ensure!(
            task < self.heads.len(),
            "unknown task {task}; network has {} heads",
            self.heads.len()
        );
        let (layer_inputs, pre_activations) = self.run_extractor(batch)?;
        let features = layer_inputs.last().expect("non-empty").clone();
        let logits = self.heads[task].affine(&features)?;
        Ok(ForwardTrace {
            layer_inputs,
            features,
            logits,
            pre_activations,
        })
    }

    /// Penultimate features (the extractor output).
    pub fn extract_features(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let (mut inputs, _) = self.run_extractor(batch)?;
        Ok(inputs.pop().expect("non-empty"))
    }

    /// Input to every extractor layer followed by the extractor output.
    pub fn layer_inputs(&self, batch: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        Ok(self.run_extractor(batch)?.0)
    }

    /// Logits of `task`'s head, without keeping the trace.
    pub fn logits(&self, batch: &DenseMatrix, task: usize) -> Result<DenseMatrix> {
        Ok(self.forward(batch, task)?.logits)
    }

    /// Training-mode pass that folds this batch's pre-activation statistics into
    /// the running mean/variance. No-op when normalization is disabled.
    pub fn update_norm_stats(&mut self, batch: &DenseMatrix) -> Result<()> {
        self.check_batch(batch)?;
        let Some(norm) = self.norm.as_mut() else {
            return Ok(());
        };
        let n = batch.rows() as f64;
        let mut x = batch.clone();
        for (layer, stats) in self.extractor.iter().zip(norm.iter_mut()) {
            let mut z = layer.affine(&x)?;
            for j in 0..z.cols() {
                let mean = (0..z.rows()).map(|i| z[(i, j)]).sum::<f64>() / n;
                let var = (0..z.rows()).map(|i| (z[(i, j)] - mean).powi(2)).sum::<f64>() / n;
                stats.mean[j] = (1.0 - NORM_MOMENTUM) * stats.mean[j] + NORM_MOMENTUM * mean;
                stats.var[j] = (1.0 - NORM_MOMENTUM) * stats.var[j] + NORM_MOMENTUM * var;
            }
            normalize_in_place(&mut z, stats);
            x = if layer.relu {
                DenseMatrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)].max(0.0))
            } else {
                z
            };
        }
        Ok(())
    }

    /// Loss and exact gradients for a single-task batch. `labels` are head-local
    /// class indices.
    pub fn backward(
        &self,
        batch: &DenseMatrix,
        labels: &[usize],
        task: usize,
        loss: &LossSpec<'_>,
    ) -> Result<(f64, GradientSet)> {
        ensure!(
            task < self.heads.len(),
            "unknown task {task}; network has {} heads",
            self.heads.len()
        );
        let tasks = vec![task; labels.len()];
        self.backward_mixed(batch, labels, &tasks, loss)
    }

    /// Like [`Network::backward`], but each row is scored by its own task's head.
    pub fn backward_mixed(
        &self,
        batch: &DenseMatrix,
        labels: &[usize],
        tasks: &[usize],
        loss: &LossSpec<'_>,
    ) -> Result<(f64, GradientSet)> {
        let n = batch.rows();
        ensure!(n > 0, "empty batch");
        ensure!(
            labels.len() == n && tasks.len() == n,
            "labels/tasks must have one entry per row"
        );
        for (&y, &t) in labels.iter().zip(tasks) {
            ensure!(t < self.heads.len(), "unknown task {t}");
            ensure!(
                y < self.heads[t].out_dim(),
                "label {y} out of range for head {t} with {} classes",
                self.heads[t].out_dim()
            );
        }
        if let Some(d) = &loss.distill {
            ensure!(
                d.reference.shape() == (n, self.arch.feature_dim()),
                "distillation reference has shape {:?}, expected {:?}",
                d.reference.shape(),
                (n, self.arch.feature_dim())
            );
        }

        let (inputs, pre) = self.run_extractor(batch)?;
        let features = inputs.last().expect("non-empty");
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut d_features = DenseMatrix::zeros(n, features.cols());
        let mut head_grads: BTreeMap<usize, DenseMatrix> = BTreeMap::new();

        if loss.cross_entropy {
            let mut logits = Vec::new();
            for i in 0..n {
                let head = &self.heads[tasks[i]];
                let f = features.row(i);
                let k = head.out_dim();
                let d = head.in_dim();
                logits.clear();
                logits.extend((0..k).map(|c| {
                    let w = head.params.row(c);
                    crate::numerics::dot(&w[..d], f) + w[d]
                }));
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum_exp.ln();
                total += (lse - logits[labels[i]]) * inv_n;

                let grad = head_grads
                    .entry(tasks[i])
                    .or_insert_with(|| DenseMatrix::zeros(k, d + 1));
                let df = d_features.row_mut(i);
                for c in 0..k {
                    let p = (logits[c] - lse).exp();
                    let g = (p - if c == labels[i] { 1.0 } else { 0.0 }) * inv_n;
                    let w = head.params.row(c);
                    let grow = grad.row_mut(c);
                    for j in 0..d {
                        grow[j] += g * f[j];
                        df[j] += g * w[j];
                    }
                    grow[d] += g;
                }
            }
        }

        if let Some(dist) = &loss.distill {
            for i in 0..n {
                let f = features.row(i);
                let r = dist.reference.row(i);
                let df = d_features.row_mut(i);
                for j in 0..f.len() {
                    let diff = f[j] - r[j];
                    total += dist.weight * diff * diff * inv_n;
                    df[j] += 2.0 * dist.weight * diff * inv_n;
                }
            }
        }

        let mut grads = vec![DenseMatrix::zeros(0, 0); self.extractor.len()];
        let mut upstream = d_features;
        for l in (0..self.extractor.len()).rev() {
            let layer = &self.extractor[l];
            let z = &pre[l];
            let mut dz = upstream;
            if layer.relu {
                for (g, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if let Some(norm) = &self.norm {
                for i in 0..dz.rows() {
                    let row = dz.row_mut(i);
                    for (j, g) in row.iter_mut().enumerate() {
                        *g *= norm[l].inv_std(j);
                    }
                }
            }
            grads[l] = matmul_transa(&dz, &inputs[l].augment_ones())?;
            if l > 0 {
                let in_dim = layer.in_dim();
                let weight = DenseMatrix::from_fn(layer.out_dim(), in_dim, |i, j| layer.params[(i, j)]);
                upstream = matmul(&dz, &weight)?;
            } else {
                upstream = DenseMatrix::zeros(0, 0);
            }
        }

        Ok((
            total,
            GradientSet {
                extractor: grads,
                heads: head_grads,
            },
        ))
    }
}

fn normalize_in_place(z: &mut DenseMatrix, stats: &NormStats) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) * stats.inv_std(j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5))
    }

    /// Independent re-evaluation: explicit per-sample, per-unit loops.
    fn oracle_logits(net: &Network, batch: &DenseMatrix, task: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for i in 0..batch.rows() {
            let mut x: Vec<f64> = batch.row(i).to_vec();
            for layer in net.extractor() {
                let mut y = Vec::new();
                for o in 0..layer.out_dim() {
                    let mut s = layer.params[(o, layer.in_dim())];
                    for (k, xv) in x.iter().enumerate() {
                        s += layer.params[(o, k)] * xv;
                    }
                    y.push(if layer.relu { s.max(0.0) } else { s });
                }
                x = y;
            }
            let head = &net.heads()[task];
            let out: Vec<f64> = (0..head.out_dim())
                .map(|o| {
                    head.params[(o, head.in_dim())]
                        + x.iter().enumerate().map(|(k, v)| head.params[(o, k)] * v).sum::<f64>()
                })
                .collect();
            feats.push(x);
            logits.push(out);
        }
        (feats, logits)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let arch = ArchSpec::mlp(vec![4, 8, 8]);
        let a = Network::new(&arch, 3, 42).unwrap();
        let b = Network::new(&arch, 3, 42).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<_> = a.extractor().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(shapes, vec![(4, 8), (8, 8)]);
        assert_eq!((a.heads()[0].in_dim(), a.heads()[0].out_dim()), (8, 3));
        let c = Network::new(&arch, 3, 43).unwrap();
        assert_ne!(a.flat_parameters(), c.flat_parameters());
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(Network::new(&ArchSpec::mlp(vec![4, 0, 8]), 2, 0).is_err());
        assert!(Network::new(&ArchSpec::mlp(vec![]), 2, 0).is_err());
    }

    #[test]
    fn glorot_bound_is_respected() {
        let net = Network::new(&ArchSpec::mlp(vec![10, 30]), 2, 9).unwrap();
        let bound = (6.0_f64 / 40.0).sqrt();
        let layer = &net.extractor()[0];
        for i in 0..30 {
            for j in 0..10 {
                assert!(layer.params[(i, j)].abs() <= bound);
            }
            assert_eq!(layer.params[(i, 10)], 0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = Network::new(&ArchSpec::mlp(vec![3, 5]), 2, 1).unwrap();
        for l in net.extractor_mut() {
            l.params = DenseMatrix::zeros(l.params.rows(), l.params.cols());
        }
        let h = net.head_mut(0).unwrap();
        h.params = DenseMatrix::zeros(2, 6);
        let trace = net.forward(&random_batch(4, 3, 2), 0).unwrap();
        assert!(trace.logits.as_slice().iter().all(|&x| x == 0.0));
        assert!(net.extract_features(&random_batch(4, 3, 2)).unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_head_passes_inputs_through() {
        let head = LinearLayer::from_parts(&DenseMatrix::identity(3), &[0.0; 3], false).unwrap();
        let net = Network::from_layers(ArchSpec::mlp(vec![3]), vec![], vec![head]).unwrap();
        let x = random_batch(5, 3, 7);
        assert_eq!(net.forward(&x, 0).unwrap().logits, x);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let net = Network::new(&ArchSpec::mlp(vec![5, 7, 6]), 3, 11).unwrap();
        let x = random_batch(6, 5, 12);
        let trace = net.forward(&x, 0).unwrap();
        let (feats, logits) = oracle_logits(&net, &x, 0);
        for i in 0..6 {
            for (a, b) in trace.logits.row(i).iter().zip(&logits[i]) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in trace.features.row(i).iter().zip(&feats[i]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(trace.layer_inputs.len(), 3);
        assert_eq!(trace.layer_inputs[0], x);
        assert_eq!(net.extract_features(&x).unwrap(), trace.features);
        assert_eq!(net.forward(&x, 0).unwrap(), trace);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = Network::new(&ArchSpec::mlp(vec![5, 4]), 2, 0).unwrap();
        assert!(net.forward(&random_batch(2, 4, 0), 0).is_err());
        assert!(net.forward(&random_batch(2, 5, 0), 1).is_err());
    }

    #[test]
    fn adding_a_head_keeps_existing_outputs() {
        let mut net = Network::new(&ArchSpec::mlp(vec![4, 6]), 2, 3).unwrap();
        let x = random_batch(5, 4, 1);
        let before = net.logits(&x, 0).unwrap();
        net.add_head(3, 3).unwrap();
        assert_eq!(net.logits(&x, 0).unwrap(), before);
        assert_eq!(net.logits(&x, 1).unwrap().cols(), 3);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let net = Network::new(&ArchSpec::mlp(vec![4, 6, 5]), 3, 5).unwrap();
        let x = random_batch(4, 4, 6);
        let labels = vec![0, 2, 1, 2];
        let x2 = DenseMatrix::vstack(&[&x, &x]).unwrap();
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let (l1, g1) = net.backward(&x, &labels, 0, &LossSpec::CROSS_ENTROPY).unwrap();
        let (l2, g2) = net.backward(&x2, &labels2, 0, &LossSpec::CROSS_ENTROPY).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.extractor.iter().zip(&g2.extractor) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn coincident_features_give_zero_distillation() {
        let net = Network::new(&ArchSpec::mlp(vec![4, 6, 5]), 2, 5).unwrap();
        let x = random_batch(3, 4, 6);
        let reference = net.extract_features(&x).unwrap();
        let (loss, grads) = net
            .backward(&x, &[0, 1, 0], 0, &LossSpec::distillation_only(&reference, 1.0))
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.extractor.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn backward_rejects_bad_labels_and_reference() {
        let net = Network::new(&ArchSpec::mlp(vec![4, 6]), 2, 5).unwrap();
        let x = random_batch(3, 4, 6);
        assert!(net.backward(&x, &[0, 2, 0], 0, &LossSpec::CROSS_ENTROPY).is_err());
        let wrong = DenseMatrix::zeros(2, 6);
        assert!(net
            .backward(&x, &[0, 1, 0], 0, &LossSpec::with_distillation(&wrong, 1.0))
            .is_err());
    }

    #[test]
    fn normalization_stats_update_and_apply() {
        let mut arch = ArchSpec::mlp(vec![3, 4]);
        arch.normalization = true;
        let mut net = Network::new(&arch, 2, 1).unwrap();
        let x = random_batch(16, 3, 2);
        let before = net.logits(&x, 0).unwrap();
        net.update_norm_stats(&x).unwrap();
        assert_ne!(net.logits(&x, 0).unwrap(), before);
        let stats = &net.norm_stats().unwrap()[0];
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let mut arch = ArchSpec::mlp(vec![3, 5, 4]);
        arch.normalization = true;
        let mut net = Network::new(&arch, 2, 77).unwrap();
        net.update_norm_stats(&random_batch(8, 3, 1)).unwrap();
        net.add_head(3, 77).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        let bits = |n: &Network| n.flat_parameters().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
        assert_eq!(net, back);
    }
}
