//! Latent-to-joint regressor: a `d -> h -> h -> 7` tanh network trained on the squared
//! joint reconstruction error with seeded momentum SGD.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, JointLimit, JointVector};
use crate::artifact;
use crate::dataset::{Dataset, DOF};
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::manifold::Embedding;

pub const WEIGHTS_KIND: &str = "latentcatch decoder v1";
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            hidden: DEFAULT_HIDDEN,
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 300,
            batch: 64,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.batch == 0 || self.epochs == 0 {
            return bad("hidden, batch and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "learning rate {} must be > 0 and momentum {} in [0, 1)",
                self.learning_rate, self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} must be in [0, 1)", self.validation_fraction));
        }
        Ok(())
    }

    /// Learning rate for an epoch: halved at 50% and again at 75% of training.
    fn rate_at(&self, epoch: usize) -> f64 {
        let f = epoch as f64 / self.epochs as f64;
        let decay = if f >= 0.75 { 0.25 } else if f >= 0.5 { 0.5 } else { 1.0 };
        self.learning_rate * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub activation: String,
}

impl Architecture {
    pub fn new(input: usize, hidden: usize) -> Self {
        Architecture {
            kind: WEIGHTS_KIND.into(),
            input,
            hidden,
            output: DOF,
            activation: "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layers {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl Layers {
    fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        Layers {
            w1: glorot(hidden, input),
            b1: DVector::zeros(hidden),
            w2: glorot(hidden, hidden),
            b2: DVector::zeros(hidden),
            w3: glorot(output, hidden),
            b3: DVector::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Layers {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
            w3: DMatrix::zeros(self.w3.nrows(), self.w3.ncols()),
            b3: DVector::zeros(self.b3.len()),
        }
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter `idx` in the order w1, b1, w2, b2, w3, b3 (column-major within matrices).
    pub fn get(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn get_mut(&mut self, mut idx: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if idx < t.len() {
                return &mut t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    /// Ranges of the bias parameters in flat indexing.
    pub fn bias_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let l = self.tensors().map(|t| t.len());
        let s1 = l[0];
        let s2 = s1 + l[1] + l[2];
        let s3 = s2 + l[3] + l[4];
        [s1..s1 + l[1], s2..s2 + l[3], s3..s3 + l[5]]
    }

    /// `self = a * self + b * other`.
    fn combine(&mut self, a: f64, b: f64, other: &Layers) {
        for (x, y) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (xi, yi) in x.iter_mut().zip(y) {
                *xi = a * *xi + b * yi;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub arch: Architecture,
    pub layers: Layers,
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
    pub limits: Vec<JointLimit>,
    pub dataset_hash: String,
    pub embedding_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    /// Training loss of the returned checkpoint, mean squared radians per sample.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub initial_loss: f64,
    /// Training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub validation_curve: Vec<f64>,
    /// `(epoch, validation loss)` of every improvement; non-increasing.
    pub checkpoints: Vec<(usize, f64)>,
}

struct Forward {
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

impl DecoderNet {
    pub fn new_random(input: usize, hidden: usize, limits: Vec<JointLimit>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderNet {
            arch: Architecture::new(input, hidden),
            layers: Layers::random(input, hidden, DOF, &mut rng),
            in_mean: vec![0.0; input],
            in_scale: vec![1.0; input],
            out_mean: vec![0.0; DOF],
            out_scale: vec![1.0; DOF],
            limits,
            dataset_hash: String::new(),
            embedding_hash: String::new(),
        }
    }

    fn normalize_inputs(&self, z: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.arch.input, z.len(), |r, c| (z[c][r] - self.in_mean[r]) / self.in_scale[r])
    }

    fn forward(&self, x: &DMatrix<f64>) -> Forward {
        let l = &self.layers;
        let mut a1 = &l.w1 * x;
        add_bias(&mut a1, &l.b1);
        let h1 = a1.map(f64::tanh);
        let mut a2 = &l.w2 * &h1;
        add_bias(&mut a2, &l.b2);
        let h2 = a2.map(f64::tanh);
        let mut out = &l.w3 * &h2;
        add_bias(&mut out, &l.b3);
        Forward { h1, h2, out }
    }

    /// Raw (unclamped) joint predictions, one column per input.
    fn predict_raw(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut o = self.forward(x).out;
        for mut col in o.column_iter_mut() {
            for j in 0..DOF {
                col[j] = col[j] * self.out_scale[j] + self.out_mean[j];
            }
        }
        o
    }

    /// Mean over the batch of the squared joint error, and optionally its parameter gradient.
    fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, want_grad: bool) -> (f64, Option<Layers>) {
        let b = x.ncols() as f64;
        let f = self.forward(x);
        let mut d_out = DMatrix::zeros(DOF, x.ncols());
        let mut loss = 0.0;
        for c in 0..x.ncols() {
            for j in 0..DOF {
                let s = self.out_scale[j];
                let e = f.out[(j, c)] * s + self.out_mean[j] - y[(j, c)];
                loss += e * e;
                d_out[(j, c)] = 2.0 * e * s / b;
            }
        }
        loss /= b;
        if !want_grad {
            return (loss, None);
        }
        let l = &self.layers;
        let mut g = l.zeros_like();
        g.w3 = &d_out * f.h2.transpose();
        g.b3 = d_out.column_sum();
        let mut d2 = l.w3.transpose() * &d_out;
        d2.zip_apply(&f.h2, |d, h| *d *= 1.0 - h * h);
        g.w2 = &d2 * f.h1.transpose();
        g.b2 = d2.column_sum();
        let mut d1 = l.w2.transpose() * &d2;
        d1.zip_apply(&f.h1, |d, h| *d *= 1.0 - h * h);
        g.w1 = &d1 * x.transpose();
        g.b1 = d1.column_sum();
        (loss, Some(g))
    }

    /// De-normalized joint vector, clamped to the joint limits.
    pub fn decode(&self, z: &[f64]) -> JointVector {
        let x = self.normalize_inputs(&[z.to_vec()]);
        let raw = self.predict_raw(&x);
        let mut q = Vec::with_capacity(DOF);
        let mut clamped = 0;
        for j in 0..DOF {
            let v = raw[(j, 0)];
            let c = self.limits.get(j).map_or(v, |l| l.clamp(v));
            if c != v {
                clamped += 1;
            }
            q.push(c);
        }
        if clamped > 0 {
            log::debug!("decode clamped {clamped} joint(s) to limits");
        }
        JointVector(q)
    }

    pub fn decode_many(&self, zs: &[Vec<f64>]) -> Vec<JointVector> {
        zs.iter().map(|z| self.decode(z)).collect()
    }

    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::ArtifactMismatch(format!(
                "decoder architecture {:?} does not match expected {:?}",
                self.arch, expected
            )));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new("decoder");
        h.str(&self.arch.kind)
            .u64(self.arch.input as u64)
            .u64(self.arch.hidden as u64)
            .u64(self.arch.output as u64)
            .str(&self.arch.activation)
            .str(&self.dataset_hash)
            .str(&self.embedding_hash);
        for t in self.layers.tensors() {
            h.f64s(t);
        }
        h.f64s(&self.in_mean).f64s(&self.in_scale).f64s(&self.out_mean).f64s(&self.out_scale);
        for l in &self.limits {
            h.f64(l.lo).f64(l.hi);
        }
        h.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let l = &self.layers;
        let file = WeightsFile {
            architecture: self.arch.clone(),
            dataset_hash: self.dataset_hash.clone(),
            embedding_hash: self.embedding_hash.clone(),
            hash: self.content_hash(),
            in_mean: self.in_mean.clone(),
            in_scale: self.in_scale.clone(),
            out_mean: self.out_mean.clone(),
            out_scale: self.out_scale.clone(),
            joint_limits: self.limits.iter().map(|l| [l.lo, l.hi]).collect(),
            w1: rows(&l.w1),
            b1: l.b1.iter().copied().collect(),
            w2: rows(&l.w2),
            b2: l.b2.iter().copied().collect(),
            w3: rows(&l.w3),
            b3: l.b3.iter().copied().collect(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        artifact::write(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            message,
        };
        let a = &f.architecture;
        if a.kind != WEIGHTS_KIND || a.output != DOF || a.activation != "tanh" {
            return Err(Error::ArtifactMismatch(format!("unsupported decoder architecture {a:?}")));
        }
        let mat = |name: &str, m: &[Vec<f64>], r: usize, c: usize| -> Result<DMatrix<f64>> {
            if m.len() != r || m.iter().any(|row| row.len() != c) {
                return Err(Error::ArtifactMismatch(format!(
                    "layer {name} does not have the {r}x{c} shape of the architecture header"
                )));
            }
            Ok(DMatrix::from_fn(r, c, |i, j| m[i][j]))
        };
        let vec = |name: &str, v: &[f64], n: usize| -> Result<DVector<f64>> {
            if v.len() != n {
                return Err(Error::ArtifactMismatch(format!(
                    "{name} has length {} but the architecture needs {n}",
                    v.len()
                )));
            }
            Ok(DVector::from_column_slice(v))
        };
        let (i, h) = (a.input, a.hidden);
        let layers = Layers {
            w1: mat("w1", &f.w1, h, i)?,
            b1: vec("b1", &f.b1, h)?,
            w2: mat("w2", &f.w2, h, h)?,
            b2: vec("b2", &f.b2, h)?,
            w3: mat("w3", &f.w3, DOF, h)?,
            b3: vec("b3", &f.b3, DOF)?,
        };
        for (name, v, n) in [
            ("in_mean", &f.in_mean, i),
            ("in_scale", &f.in_scale, i),
            ("out_mean", &f.out_mean, DOF),
            ("out_scale", &f.out_scale, DOF),
        ] {
            vec(name, v, n)?;
        }
        if !f.joint_limits.is_empty() && f.joint_limits.len() != DOF {
            return Err(schema(format!("expected {DOF} joint limits, found {}", f.joint_limits.len())));
        }
        let net = DecoderNet {
            arch: f.architecture.clone(),
            layers,
            in_mean: f.in_mean,
            in_scale: f.in_scale,
            out_mean: f.out_mean,
            out_scale: f.out_scale,
            limits: f.joint_limits.into_iter().map(JointLimit::from).collect(),
            dataset_hash: f.dataset_hash,
            embedding_hash: f.embedding_hash,
        };
        let got = net.content_hash();
        if got != f.hash {
            return Err(Error::ArtifactMismatch(format!(
                "{}: stored hash {} does not match content {got}",
                path.display(),
                f.hash
            )));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    architecture: Architecture,
    dataset_hash: String,
    embedding_hash: String,
    hash: String,
    in_mean: Vec<f64>,
    in_scale: Vec<f64>,
    out_mean: Vec<f64>,
    out_scale: Vec<f64>,
    joint_limits: Vec<[f64; 2]>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    w3: Vec<Vec<f64>>,
    b3: Vec<f64>,
}

fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for c in 0..dim {
            mean[c] += r[c] / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for c in 0..dim {
            var[c] += (r[c] - mean[c]).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Output normalization used during training and undone by `decode`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn columns(rows: &[Vec<f64>], idx: &[usize], height: usize) -> DMatrix<f64> {
    DMatrix::from_fn(height, idx.len(), |r, c| rows[idx[c]][r])
}

/// Trains on explicit latent inputs and joint targets.
pub fn train_arrays(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    output: Option<OutputScaling>,
    limits: Vec<JointLimit>,
    hyper: &TrainHyper,
) -> Result<(DecoderNet, TrainReport)> {
    hyper.validate()?;
    let n = inputs.len();
    if n < 2 || targets.len() != n {
        return Err(Error::Domain(format!(
            "need at least 2 paired samples, got {n} inputs and {} targets",
            targets.len()
        )));
    }
    let dim = inputs[0].len();
    if dim == 0 || inputs.iter().any(|z| z.len() != dim) || targets.iter().any(|t| t.len() != DOF) {
        return Err(Error::Domain(format!("inputs must share one dimension and targets have {DOF} joints")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = DecoderNet::new_random(dim, hyper.hidden, limits, rng.random());
    let (im, is) = column_stats(inputs, dim);
    net.in_mean = im;
    net.in_scale = is;
    let out = output.unwrap_or_else(|| {
        let (mean, scale) = column_stats(targets, DOF);
        OutputScaling { mean, scale }
    });
    net.out_mean = out.mean;
    net.out_scale = out.scale;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * hyper.validation_fraction).round() as usize).min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let x_train_all = {
        let rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
        net.normalize_inputs(&rows)
    };
    let y_train_all = columns(targets, &train_idx, DOF);
    let val = if val_idx.is_empty() {
        None
    } else {
        let rows: Vec<Vec<f64>> = val_idx.iter().map(|&i| inputs[i].clone()).collect();
        Some((net.normalize_inputs(&rows), columns(targets, val_idx, DOF)))
    };
    let eval = |net: &DecoderNet| {
        let tr = net.loss_and_grad(&x_train_all, &y_train_all, false).0;
        let va = val.as_ref().map_or(tr, |(x, y)| net.loss_and_grad(x, y, false).0);
        (tr, va)
    };

    let (initial, initial_val) = eval(&net);
    let mut velocity = net.layers.zeros_like();
    let mut best = (net.clone(), initial, initial_val, 0usize);
    let mut report = TrainReport {
        epochs: hyper.epochs,
        best_epoch: 0,
        train_loss: initial,
        validation_loss: initial_val,
        initial_loss: initial,
        loss_curve: Vec::with_capacity(hyper.epochs),
        validation_curve: Vec::with_capacity(hyper.epochs),
        checkpoints: vec![(0, initial_val)],
    };
    let position: std::collections::HashMap<usize, usize> =
        train_idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    for epoch in 1..=hyper.epochs {
        let lr = hyper.rate_at(epoch - 1);
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(hyper.batch) {
            let cols: Vec<usize> = chunk.iter().map(|i| position[i]).collect();
            let x = x_train_all.select_columns(&cols);
            let y = y_train_all.select_columns(&cols);
            let (_, g) = net.loss_and_grad(&x, &y, true);
            velocity.combine(hyper.momentum, -lr, &g.expect("gradient"));
            net.layers.combine(1.0, 1.0, &velocity);
        }
        let (tr, va) = eval(&net);
        report.loss_curve.push(tr);
        report.validation_curve.push(va);
        if !net.layers.is_finite() || !tr.is_finite() || tr > 10.0 * initial.max(1e-300) {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: tr,
                initial,
            });
        }
        if va < best.2 {
            best = (net.clone(), tr, va, epoch);
            report.checkpoints.push((epoch, va));
        }
    }
    let (net, tr, va, ep) = best;
    report.best_epoch = ep;
    report.train_loss = tr;
    report.validation_loss = va;
    Ok((net, report))
}

/// Trains the decoder on `(coords[i], theta_i)` pairs of an embedding and its dataset.
pub fn train(emb: &Embedding, ds: &Dataset, model: &ArmModel, hyper: &TrainHyper) -> Result<(DecoderNet, TrainReport)> {
    if emb.dataset_hash != ds.hash || emb.len() != ds.len() {
        return Err(Error::ArtifactMismatch(format!(
            "embedding of dataset {} ({} rows) used with dataset {} ({} rows)",
            emb.dataset_hash,
            emb.len(),
            ds.hash,
            ds.len()
        )));
    }
    let targets: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.theta.0.clone()).collect();
    let scaling = OutputScaling {
        mean: ds.scaling.mean[..DOF].to_vec(),
        scale: ds.scaling.scale[..DOF].to_vec(),
    };
    let (mut net, report) = train_arrays(&emb.coords, &targets, Some(scaling), model.joint_limits.clone(), hyper)?;
    net.dataset_hash = ds.hash.clone();
    net.embedding_hash = emb.hash.clone();
    log::info!(
        "decoder trained: best epoch {} train {:.5} validation {:.5}",
        report.best_epoch,
        report.train_loss,
        report.validation_loss
    );
    Ok((net, report))
}

/// Max relative error between analytic and central-difference gradients at `n_probes`
/// seeded parameter indices, on a seeded random batch.
pub fn gradient_check(net: &DecoderNet, n_probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 16;
    let x = DMatrix::from_fn(net.arch.input, batch, |_, _| rng.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(DOF, batch, |_, _| rng.random_range(-2.0..2.0));
    let probes: Vec<usize> = (0..n_probes).map(|_| rng.random_range(0..net.layers.len())).collect();
    gradient_check_batch(net, &x, &y, &probes)
}

/// As `gradient_check` on a given normalized batch (`input x B`, `7 x B`) and probe set.
pub fn gradient_check_batch(net: &DecoderNet, x: &DMatrix<f64>, y: &DMatrix<f64>, probes: &[usize]) -> f64 {
    let step = 1e-5;
    let (_, g) = net.loss_and_grad(x, y, true);
    let g = g.expect("gradient");
    let mut worst: f64 = 0.0;
    let mut probe_net = net.clone();
    for &p in probes {
        let orig = net.layers.get(p);
        *probe_net.layers.get_mut(p) = orig + step;
        let lp = probe_net.loss_and_grad(x, y, false).0;
        *probe_net.layers.get_mut(p) = orig - step;
        let lm = probe_net.loss_and_grad(x, y, false).0;
        *probe_net.layers.get_mut(p) = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = g.get(p);
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderQuality {
    /// Median joint-space (Euclidean) error over safe samples, radians.
    pub median_error: f64,
    /// Decoded variance over target variance, per joint.
    pub variance_ratio: Vec<f64>,
    /// Pairs farther apart than the 10th-percentile latent spacing that decode identically.
    pub identical_pairs: usize,
    pub evaluated: usize,
}

pub fn evaluate(net: &DecoderNet, emb: &Embedding, ds: &Dataset) -> Result<DecoderQuality> {
    if emb.len() != ds.len() {
        return Err(Error::ArtifactMismatch("embedding and dataset lengths differ".into()));
    }
    let safe: Vec<usize> = (0..ds.len()).filter(|&i| !ds.samples[i].collision).collect();
    if safe.is_empty() {
        return Err(Error::Domain("no safe samples to evaluate".into()));
    }
    let decoded: Vec<JointVector> = safe.iter().map(|&i| net.decode(&emb.coords[i])).collect();
    let mut errors: Vec<f64> = safe
        .iter()
        .zip(&decoded)
        .map(|(&i, q)| q.distance(&ds.samples[i].theta))
        .collect();
    errors.sort_by(f64::total_cmp);
    let m = errors.len();
    let median_error = if m % 2 == 1 { errors[m / 2] } else { 0.5 * (errors[m / 2 - 1] + errors[m / 2]) };

    let mut variance_ratio = Vec::with_capacity(DOF);
    for j in 0..DOF {
        let var = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
        };
        let dv = var(&mut decoded.iter().map(|q| q.0[j]));
        let tv = var(&mut safe.iter().map(|&i| ds.samples[i].theta.0[j]));
        variance_ratio.push(if tv > 0.0 { dv / tv } else { 1.0 });
    }

    // identical outputs are adjacent after a lexicographic sort
    let mut nn: Vec<f64> = safe
        .iter()
        .map(|&i| emb.neighbors(i, 1).first().map_or(0.0, |&j| emb.distance(i, j)))
        .collect();
    nn.sort_by(f64::total_cmp);
    let p10 = nn[(nn.len() - 1) / 10];
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        decoded[a]
            .0
            .iter()
            .zip(&decoded[b].0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut identical_pairs = 0;
    for w in order.windows(2) {
        if decoded[w[0]] == decoded[w[1]] && emb.distance(safe[w[0]], safe[w[1]]) > p10 {
            identical_pairs += 1;
        }
    }
    Ok(DecoderQuality {
        median_error,
        variance_ratio,
        identical_pairs,
        evaluated: m,
    })
}
