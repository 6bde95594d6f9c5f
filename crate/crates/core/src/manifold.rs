//! Diffusion maps: Gaussian kernel Markov operator, spectral embedding, diffusion distance and
//! the latent random-walk sampler.
//!
//! With `K` the kernel, `d = K 1`, `P = D^-1 K` and `pi = d / sum(d)`, the right eigenvectors
//! `psi` of `P` are normalized so that `sum_k pi_k psi(k)^2 = 1`. Then
//! `D_t(i, j)^2 = sum_k (P^t[i,k] - P^t[j,k])^2 / pi_k = sum_l lambda_l^(2t) (psi_l(i) - psi_l(j))^2`.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, check_columns, join_f64, read_header, Header, MetaBlock};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::spectral::{dense_descending, lanczos_largest, LanczosOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldConfig {
    /// Kernel bandwidth; `None` picks the median of squared `alpha_neighbors`-NN distances.
    pub alpha: Option<f64>,
    pub alpha_neighbors: usize,
    /// Keep only mutual k-nearest-neighbor kernel entries.
    pub knn_sparsify: Option<usize>,
    pub t: u32,
    pub dims: usize,
    pub solver: EigenSolver,
    /// Largest n solved densely under `EigenSolver::Auto`.
    pub dense_limit: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            alpha: None,
            alpha_neighbors: 16,
            knn_sparsify: None,
            t: 1,
            dims: 2,
            solver: EigenSolver::Auto,
            dense_limit: 600,
        }
    }
}

impl ManifoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if self.alpha_neighbors == 0 || self.knn_sparsify == Some(0) {
            return Err(Error::Config("neighbor counts must be >= 1".into()));
        }
        if self.t == 0 || self.dims == 0 {
            return Err(Error::Config("t and dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Compressed sparse rows of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            (self.indptr[i]..self.indptr[i + 1])
                .map(|p| self.values[p] * x[self.indices[p]])
                .sum()
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        row.binary_search(&j)
            .map(|p| self.values[self.indptr[i] + p])
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
pub enum KernelMatrix {
    Dense(DMatrix<f64>),
    Sparse(Csr),
}

#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    pub alpha: f64,
    pub t: u32,
    pub kernel: KernelMatrix,
    pub degree: DVector<f64>,
    pub source_hash: String,
}

fn sq_dist(f: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..f.ncols() {
        let d = f[(i, c)] - f[(j, c)];
        s += d * d;
    }
    s
}

/// Squared distances to the `k` nearest other points of every row, ascending, ties by index.
pub fn knn_sq_distances(features: &DMatrix<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = features.nrows();
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist(features, i, j)))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if k < row.len() && k > 0 {
                row.select_nth_unstable_by(k - 1, cmp);
                row.truncate(k);
            }
            row.truncate(k);
            row.sort_by(cmp);
            row
        })
        .collect()
}

/// Median over all points of the squared distances to their `k` nearest neighbors.
pub fn median_knn_bandwidth(features: &DMatrix<f64>, k: usize) -> f64 {
    let mut all: Vec<f64> = knn_sq_distances(features, k)
        .into_iter()
        .flatten()
        .map(|(_, d)| d)
        .collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    }
}

fn components(n: usize, neighbors: impl Fn(usize, &mut Vec<usize>)) -> usize {
    let mut seen = vec![false; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    let mut buf = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            buf.clear();
            neighbors(u, &mut buf);
            for &v in &buf {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    count
}

pub fn build_operator(
    features: &DMatrix<f64>,
    cfg: &ManifoldConfig,
    source_hash: &str,
) -> Result<DiffusionOperator> {
    cfg.validate()?;
    let n = features.nrows();
    if n < 3 {
        return Err(Error::Config(format!("diffusion maps need n >= 3, got {n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let alpha = match cfg.alpha {
        Some(a) => a,
        None => median_knn_bandwidth(features, cfg.alpha_neighbors),
    };
    if !(alpha > 0.0) {
        return Err(Error::Numerical(format!(
            "kernel bandwidth {alpha} is not positive (duplicate points?)"
        )));
    }

    let kernel = match cfg.knn_sparsify {
        None => {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| (0..n).map(|j| (-sq_dist(features, i, j) / alpha).exp()).collect())
                .collect();
            KernelMatrix::Dense(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        }
        Some(k) => {
            let knn = knn_sq_distances(features, k);
            let sets: Vec<Vec<usize>> = knn
                .iter()
                .map(|r| {
                    let mut v: Vec<usize> = r.iter().map(|p| p.0).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            let mut indptr = vec![0];
            let mut indices = Vec::new();
            let mut values = Vec::new();
            for (i, row) in knn.iter().enumerate() {
                let mut entries: Vec<(usize, f64)> = row
                    .iter()
                    .filter(|(j, _)| sets[*j].binary_search(&i).is_ok())
                    .map(|&(j, d2)| (j, (-d2 / alpha).exp()))
                    .collect();
                entries.push((i, 1.0));
                entries.sort_by_key(|e| e.0);
                for (j, v) in entries {
                    indices.push(j);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
            KernelMatrix::Sparse(Csr {
                n,
                indptr,
                indices,
                values,
            })
        }
    };

    let ncomp = match &kernel {
        KernelMatrix::Dense(k) => components(n, |u, out| {
            out.extend((0..n).filter(|&v| v != u && k[(u, v)] > 0.0));
        }),
        KernelMatrix::Sparse(c) => components(n, |u, out| {
            for p in c.indptr[u]..c.indptr[u + 1] {
                if c.indices[p] != u && c.values[p] > 0.0 {
                    out.push(c.indices[p]);
                }
            }
        }),
    };
    if ncomp > 1 {
        return Err(Error::Disconnected(format!(
            "{ncomp} components at alpha = {alpha:e}{}",
            cfg.knn_sparsify
                .map(|k| format!(" with mutual {k}-NN sparsification"))
                .unwrap_or_default()
        )));
    }

    let ones = DVector::from_element(n, 1.0);
    let degree = match &kernel {
        KernelMatrix::Dense(k) => k * &ones,
        KernelMatrix::Sparse(c) => c.matvec(&ones),
    };
    Ok(DiffusionOperator {
        alpha,
        t: cfg.t,
        kernel,
        degree,
        source_hash: source_hash.to_string(),
    })
}

pub fn build_operator_for(ds: &Dataset, cfg: &ManifoldConfig) -> Result<DiffusionOperator> {
    build_operator(&ds.features(), cfg, &ds.hash)
}

impl DiffusionOperator {
    pub fn n(&self) -> usize {
        self.degree.len()
    }

    pub fn kernel_entry(&self, i: usize, j: usize) -> f64 {
        match &self.kernel {
            KernelMatrix::Dense(k) => k[(i, j)],
            KernelMatrix::Sparse(c) => c.get(i, j),
        }
    }

    pub fn kernel_matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kernel {
            KernelMatrix::Dense(k) => k * x,
            KernelMatrix::Sparse(c) => c.matvec(x),
        }
    }

    pub fn transition_entry(&self, i: usize, j: usize) -> f64 {
        self.kernel_entry(i, j) / self.degree[i]
    }

    /// `P x`
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.kernel_matvec(x).component_div(&self.degree)
    }

    /// `y^T P` as a column vector.
    pub fn apply_left(&self, y: &DVector<f64>) -> DVector<f64> {
        self.kernel_matvec(&y.component_div(&self.degree))
    }

    /// Row `i` of `P^t`.
    pub fn power_row(&self, i: usize, t: u32) -> DVector<f64> {
        let mut r = DVector::zeros(self.n());
        r[i] = 1.0;
        for _ in 0..t {
            r = self.apply_left(&r);
        }
        r
    }

    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.transition_entry(i, j))
    }

    pub fn stationary(&self) -> DVector<f64> {
        &self.degree / self.degree.sum()
    }

    /// `D^-1/2 K D^-1/2 x`
    pub fn symmetric_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = self.degree.map(|d| d.sqrt());
        self.kernel_matvec(&x.component_div(&s)).component_div(&s)
    }

    /// Eigenvector of the symmetric form for the unit eigenvalue.
    pub fn trivial_vector(&self) -> DVector<f64> {
        let s = self.degree.map(|d| d.sqrt());
        let norm = s.norm();
        s / norm
    }

    pub fn symmetric_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let s = self.degree.map(|d| d.sqrt());
        DMatrix::from_fn(n, n, |i, j| self.kernel_entry(i, j) / (s[i] * s[j]))
    }

    /// Gershgorin lower bound on the spectrum of `P`, `min_i 2 P_ii - 1`.
    pub fn gershgorin_lower_bound(&self) -> f64 {
        (0..self.n())
            .map(|i| 2.0 * self.transition_entry(i, i) - 1.0)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Direct diffusion distance from rows of `P^t`, weighted by the inverse stationary density.
pub fn diffusion_distance(op: &DiffusionOperator, i: usize, j: usize) -> f64 {
    if i == j {
        return 0.0;
    }
    let ri = op.power_row(i, op.t);
    let rj = op.power_row(j, op.t);
    let pi = op.stationary();
    (0..op.n())
        .map(|k| (ri[k] - rj[k]).powi(2) / pi[k])
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// Row `i` is the latent point of sample `i`.
    pub coords: Vec<Vec<f64>>,
    /// Descending, trivial eigenvalue excluded.
    pub eigenvalues: Vec<f64>,
    pub alpha: f64,
    pub t: u32,
    pub dataset_hash: String,
    pub hash: String,
}

fn fix_sign(v: &mut DVector<f64>) {
    let max = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * max) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Nontrivial eigenpairs of the symmetric form from a dense solve.
fn dense_pairs(op: &DiffusionOperator, d: usize) -> (Vec<f64>, Vec<DVector<f64>>) {
    let v0 = op.trivial_vector();
    // the spectrum lies above -1, so the unit eigenvalue shifted to -2 sorts last
    let a = op.symmetric_dense() - (&v0 * v0.transpose()) * 3.0;
    let (mut values, mut vectors) = dense_descending(a);
    values.pop();
    vectors.pop();
    values.truncate(d);
    vectors.truncate(d);
    (values, vectors)
}

fn lanczos_pairs(op: &DiffusionOperator, d: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let v0 = op.trivial_vector();
    let r = lanczos_largest(
        op.n(),
        d,
        |x| op.symmetric_apply(x),
        std::slice::from_ref(&v0),
        LanczosOptions::default(),
    )?;
    log::debug!(
        "Lanczos: Krylov dimension {}, max residual {:e}",
        r.krylov_dim,
        r.max_residual
    );
    Ok((r.values, r.vectors))
}

pub fn embed(op: &DiffusionOperator, d: usize) -> Result<Embedding> {
    embed_with(op, d, EigenSolver::Auto, ManifoldConfig::default().dense_limit)
}

pub fn embed_with(
    op: &DiffusionOperator,
    d: usize,
    solver: EigenSolver,
    dense_limit: usize,
) -> Result<Embedding> {
    let n = op.n();
    if d == 0 || d >= n {
        return Err(Error::Config(format!("embedding dimension {d} must be in 1..{n}")));
    }
    let dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::Lanczos => false,
        EigenSolver::Auto => n <= dense_limit,
    };
    let (values, vectors) = if dense {
        dense_pairs(op, d)
    } else {
        lanczos_pairs(op, d)?
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    let total = op.degree.sum();
    let inv_sqrt_pi = op.degree.map(|x| (total / x).sqrt());
    let mut columns = Vec::with_capacity(d);
    for (lambda, v) in values.iter().zip(vectors) {
        let mut psi = v.component_mul(&inv_sqrt_pi);
        fix_sign(&mut psi);
        columns.push(psi * lambda.powi(op.t as i32));
    }
    let coords: Vec<Vec<f64>> = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    let mut emb = Embedding {
        coords,
        eigenvalues: values,
        alpha: op.alpha,
        t: op.t,
        dataset_hash: op.source_hash.clone(),
        hash: String::new(),
    };
    emb.hash = emb.content_hash();
    Ok(emb)
}

/// Operator plus embedding as configured.
pub fn embed_dataset(ds: &Dataset, cfg: &ManifoldConfig) -> Result<(DiffusionOperator, Embedding)> {
    let op = build_operator_for(ds, cfg)?;
    let emb = embed_with(&op, cfg.dims, cfg.solver, cfg.dense_limit)?;
    Ok((op, emb))
}

/// Extremal eigenvalues of `P`: the `k` largest and the `k` smallest.
pub fn extremal_eigenvalues(op: &DiffusionOperator, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = op.n();
    let top = lanczos_largest(n, k, |x| op.symmetric_apply(x), &[], LanczosOptions::default())?;
    let bottom = lanczos_largest(
        n,
        k,
        |x| -op.symmetric_apply(x),
        &[],
        LanczosOptions {
            tol: 1e-6,
            ..LanczosOptions::default()
        },
    )?;
    Ok((top.values, bottom.values.iter().map(|v| -v).collect()))
}

pub const DEFAULT_WALK_NEIGHBORS: usize = 10;

impl Embedding {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        latent_distance(&self.coords[i], &self.coords[j])
    }

    fn content_hash(&self) -> String {
        let mut h = ContentHasher::new("embedding");
        h.str(&self.dataset_hash)
            .f64(self.alpha)
            .u64(self.t as u64)
            .f64s(&self.eigenvalues)
            .u64(self.coords.len() as u64);
        for c in &self.coords {
            h.f64s(c);
        }
        h.finish()
    }

    /// Indices of the `k` nearest latent neighbors of `i` (excluding `i`), ties by index.
    pub fn neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != i)
            .map(|j| (self.distance(i, j), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|p| p.1).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut meta = MetaBlock::new(EMBEDDING_TAG);
        meta.set("dataset_hash", &self.dataset_hash)
            .set("alpha", self.alpha)
            .set("t", self.t)
            .set("dims", self.dims())
            .set("coords", "lambda^t psi")
            .set("eigenvalues", join_f64(&self.eigenvalues))
            .set("rows", self.len())
            .set("hash", &self.hash);
        let mut w = csv::Writer::from_writer(meta.render().into_bytes());
        let header = embedding_columns(self.dims());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (i, c) in self.coords.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(c.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        artifact::write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let Header {
            meta,
            first_line,
            first_line_no,
            rest,
        } = read_header(path, artifact::open(path)?)?;
        meta.expect_tag(EMBEDDING_TAG, path)?;
        let dims = meta.require_u64("dims", path)? as usize;
        let names = embedding_columns(dims);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        check_columns(path, &first_line, &name_refs)?;
        let rows = meta.require_u64("rows", path)? as usize;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(rest);
        let mut coords = Vec::with_capacity(rows);
        for (k, rec) in rdr.records().enumerate() {
            let line = first_line_no + k + 1;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != dims + 1 {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", dims + 1, rec.len()),
                ));
            }
            let idx: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("field 'index': cannot parse '{}'", &rec[0])))?;
            if idx != k {
                return Err(parse_err(line, format!("index {idx} out of sequence (expected {k})")));
            }
            let mut c = Vec::with_capacity(dims);
            for f in 1..=dims {
                c.push(rec[f].trim().parse::<f64>().map_err(|_| {
                    parse_err(line, format!("field '{}': cannot parse '{}'", names[f], &rec[f]))
                })?);
            }
            coords.push(c);
        }
        if coords.len() != rows {
            return Err(parse_err(
                first_line_no + coords.len() + 1,
                format!("truncated: header declares {rows} rows, found {}", coords.len()),
            ));
        }
        let mut emb = Embedding {
            coords,
            eigenvalues: meta.require_vec("eigenvalues", Some(dims), path)?,
            alpha: meta.require_f64("alpha", path)?,
            t: meta.require_u64("t", path)? as u32,
            dataset_hash: meta.require("dataset_hash", path)?.to_string(),
            hash: String::new(),
        };
        emb.hash = emb.content_hash();
        let declared = meta.require("hash", path)?;
        if declared != emb.hash {
            return Err(Error::ArtifactMismatch(format!(
                "{}: content hash {} does not match header {declared}",
                path.display(),
                emb.hash
            )));
        }
        Ok(emb)
    }
}

const EMBEDDING_TAG: &str = "latentcatch embedding v1";

fn embedding_columns(dims: usize) -> Vec<String> {
    std::iter::once("index".to_string())
        .chain((1..=dims).map(|k| format!("z{k}")))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn latent_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian draw around `coords[i]` with covariance `scale` times the empirical covariance of
/// its `k` nearest latent neighbors.
pub fn latent_walk_sample_k(emb: &Embedding, i: usize, scale: f64, k: usize, seed: u64) -> Result<Vec<f64>> {
    if i >= emb.len() {
        return Err(Error::Domain(format!("index {i} out of range ({})", emb.len())));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("scale {scale} must be > 0")));
    }
    let nb = emb.neighbors(i, k);
    if nb.len() < 3 {
        return Err(Error::DegenerateCovariance(format!(
            "{} latent neighbors available, need at least 3",
            nb.len()
        )));
    }
    let d = emb.dims();
    let m = nb.len() as f64;
    let mean = DVector::from_fn(d, |c, _| nb.iter().map(|&j| emb.coords[j][c]).sum::<f64>() / m);
    let mut cov = DMatrix::zeros(d, d);
    for &j in &nb {
        let x = DVector::from_fn(d, |c, _| emb.coords[j][c]) - &mean;
        cov += &x * x.transpose();
    }
    cov /= m - 1.0;
    let eig = SymmetricEigen::new(cov * scale);
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let step = root * noise;
    Ok((0..d).map(|c| emb.coords[i][c] + step[c]).collect())
}

pub fn latent_walk_sample(emb: &Embedding, i: usize, scale: f64, seed: u64) -> Result<Vec<f64>> {
    latent_walk_sample_k(emb, i, scale, DEFAULT_WALK_NEIGHBORS, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn op_for(f: &DMatrix<f64>, cfg: ManifoldConfig) -> DiffusionOperator {
        build_operator(f, &cfg, "test").unwrap()
    }

    #[test]
    fn identical_points_have_unit_kernel() {
        let mut f = random_features(10, 3, 1);
        for c in 0..3 {
            f[(1, c)] = f[(0, c)];
        }
        let op = op_for(&f, ManifoldConfig::default());
        assert_eq!(op.kernel_entry(0, 1), 1.0);
        assert_eq!(op.kernel_entry(4, 4), 1.0);
    }

    #[test]
    fn rows_are_stochastic() {
        let f = random_features(200, 5, 2);
        for cfg in [
            ManifoldConfig::default(),
            ManifoldConfig {
                knn_sparsify: Some(20),
                ..Default::default()
            },
        ] {
            let op = op_for(&f, cfg);
            let p = op.transition_matrix();
            for i in 0..200 {
                assert!((p.row(i).sum() - 1.0).abs() < 1e-10);
                assert!(p.row(i).iter().all(|v| *v >= 0.0));
            }
            for t in 1..=8 {
                let r = op.power_row(7, t);
                assert!((r.sum() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sparse_kernel_is_symmetric() {
        let f = random_features(150, 4, 3);
        let op = op_for(&f, ManifoldConfig { knn_sparsify: Some(12), ..Default::default() });
        for i in 0..150 {
            for j in 0..150 {
                assert_eq!(op.kernel_entry(i, j), op.kernel_entry(j, i));
            }
        }
    }

    #[test]
    fn auto_alpha_matches_brute_force_median() {
        let f = random_features(300, 6, 42);
        let op = op_for(&f, ManifoldConfig::default());
        let mut all = Vec::new();
        for i in 0..300 {
            let mut row = Vec::new();
            for j in 0..300 {
                if i != j {
                    let mut s = 0.0;
                    for c in 0..6 {
                        s += (f[(i, c)] - f[(j, c)]).powi(2);
                    }
                    row.push(s);
                }
            }
            row.sort_by(f64::total_cmp);
            all.extend_from_slice(&row[..16]);
        }
        all.sort_by(f64::total_cmp);
        let med = (all[all.len() / 2 - 1] + all[all.len() / 2]) / 2.0;
        assert_eq!(op.alpha, med);
    }

    #[test]
    fn equilateral_triangle() {
        let f = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, 3f64.sqrt() / 2.0]);
        let op = op_for(&f, ManifoldConfig { alpha: Some(1.0), ..Default::default() });
        let emb = embed(&op, 2).unwrap();
        // P = (1-2c) I + c J-ish with c = e^-1 / (1 + 2 e^-1): nontrivial eigenvalue 1 - 3c
        let e = (-1.0f64).exp();
        let lam = 1.0 - 3.0 * e / (1.0 + 2.0 * e);
        for l in &emb.eigenvalues {
            assert!((l - lam).abs() < 1e-12);
        }
        let d01 = emb.distance(0, 1);
        assert!((emb.distance(1, 2) - d01).abs() < 1e-12);
        assert!((emb.distance(0, 2) - d01).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_split_by_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DMatrix::from_fn(40, 2, |i, c| {
            let base = if i < 20 { 0.0 } else { 4.0 };
            base * (c == 0) as i32 as f64 + rng.random_range(-0.2..0.2)
        });
        let op = op_for(&f, ManifoldConfig { alpha: Some(1.0), ..Default::default() });
        let emb = embed(&op, 2).unwrap();
        let s0 = emb.coords[0][0].signum();
        assert_eq!(s0, 1.0);
        for i in 0..40 {
            let expect = if i < 20 { s0 } else { -s0 };
            assert_eq!(emb.coords[i][0].signum(), expect, "point {i}");
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let f = random_features(120, 4, 6);
        let op = op_for(&f, ManifoldConfig::default());
        let a = embed(&op, 2).unwrap();
        let b = embed(&op, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_embedding_reproduces_diffusion_distance() {
        let f = random_features(30, 3, 7);
        for t in [1, 2, 3] {
            let op = op_for(&f, ManifoldConfig { t, ..Default::default() });
            let emb = embed(&op, 29).unwrap();
            for i in 0..30 {
                for j in 0..30 {
                    let d = diffusion_distance(&op, i, j);
                    assert!((d - emb.distance(i, j)).abs() < 1e-9, "t={t} ({i},{j})");
                }
            }
            assert_eq!(diffusion_distance(&op, 3, 8), diffusion_distance(&op, 8, 3));
        }
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let f = random_features(400, 5, 8);
        let op = op_for(&f, ManifoldConfig::default());
        let a = embed_with(&op, 3, EigenSolver::Dense, 0).unwrap();
        let b = embed_with(&op, 3, EigenSolver::Lanczos, 0).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() < 1e-10);
        }
        for i in 0..400 {
            for c in 0..3 {
                assert!((a.coords[i][c] - b.coords[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spectrum_bounds() {
        let f = random_features(300, 4, 9);
        let op = op_for(&f, ManifoldConfig::default());
        let (top, bottom) = extremal_eigenvalues(&op, 2).unwrap();
        assert!((top[0] - 1.0).abs() < 1e-10);
        assert!(top[1] < 1.0 - 1e-6);
        assert!(bottom.iter().all(|v| *v > -1.0));
        assert!(op.gershgorin_lower_bound() > -1.0);
        let emb = embed(&op, 2).unwrap();
        assert!(emb.eigenvalues[0] < 1.0 && emb.eigenvalues[1] > 0.0);
        assert!(emb.eigenvalues[0] >= emb.eigenvalues[1]);
    }

    #[test]
    fn disconnected_kernel_is_an_error() {
        let f = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 1e6, 1e6 + 0.1]);
        let r = build_operator(&f, &ManifoldConfig { alpha: Some(1.0), ..Default::default() }, "");
        assert!(matches!(r, Err(Error::Disconnected(_))));
    }

    #[test]
    fn walk_sampler_statistics() {
        let f = random_features(200, 3, 10);
        let op = op_for(&f, ManifoldConfig::default());
        let emb = embed(&op, 2).unwrap();
        let tiny = latent_walk_sample(&emb, 5, 1e-300, 1).unwrap();
        assert_eq!(tiny, emb.coords[5]);
        assert_eq!(
            latent_walk_sample(&emb, 5, 1.0, 77).unwrap(),
            latent_walk_sample(&emb, 5, 1.0, 77).unwrap()
        );
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|s| latent_walk_sample(&emb, 5, 2.0, s).unwrap()).collect();
        for c in 0..2 {
            let mean = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / n as f64;
            let sigma = var.sqrt();
            assert!((mean - emb.coords[5][c]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
        let small = Embedding {
            coords: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            eigenvalues: vec![0.5, 0.4],
            alpha: 1.0,
            t: 1,
            dataset_hash: String::new(),
            hash: String::new(),
        };
        assert!(matches!(
            latent_walk_sample(&small, 0, 1.0, 0),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn embedding_file_round_trip() {
        let f = random_features(60, 3, 11);
        let op = op_for(&f, ManifoldConfig::default());
        let emb = embed(&op, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        emb.save(&p).unwrap();
        let back = Embedding::load(&p).unwrap();
        assert_eq!(back, emb);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("index,z1,z2", "index,z1")).unwrap();
        assert!(matches!(Embedding::load(&p), Err(Error::Schema { .. })));
    }
}
