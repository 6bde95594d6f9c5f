//! Extremal eigenpairs of symmetric operators given only as matrix-vector products.
//!
//! Lanczos with full reorthogonalization. Known eigenvectors can be deflated; the Krylov
//! dimension doubles until every wanted Ritz pair has a small true residual.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Descending.
    pub values: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
    pub krylov_dim: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// Relative residual `|A y - theta y| / max(1, |theta|)`.
    pub tol: f64,
    pub initial_dim: usize,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            tol: 1e-10,
            initial_dim: 64,
            seed: 0x5eed,
        }
    }
}

fn project_out(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for b in basis {
        let c = b.dot(w);
        w.axpy(-c, b, 1.0);
    }
}

/// `k` algebraically largest eigenpairs of the symmetric operator `op` restricted to the
/// orthogonal complement of the orthonormal `deflate` vectors.
pub fn lanczos_largest<F>(
    n: usize,
    k: usize,
    op: F,
    deflate: &[DVector<f64>],
    opts: LanczosOptions,
) -> Result<EigenPairs>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let avail = n.saturating_sub(deflate.len());
    if k == 0 || k > avail {
        return Err(Error::Numerical(format!(
            "cannot extract {k} eigenpairs from a {avail}-dimensional subspace"
        )));
    }
    let apply = |x: &DVector<f64>| {
        let mut y = op(x);
        project_out(&mut y, deflate);
        y
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let mut m = avail.min(opts.initial_dim.max(3 * k + 20));
    let mut last_residual = f64::INFINITY;
    loop {
        project_out(&mut start, deflate);
        project_out(&mut start, deflate);
        let norm = start.norm();
        if norm == 0.0 {
            return Err(Error::Numerical("Lanczos start vector vanished".into()));
        }
        let mut q: Vec<DVector<f64>> = vec![&start / norm];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut scale = 0.0_f64;
        let mut exhausted = false;
        for j in 0..m {
            let mut w = apply(&q[j]);
            let a = q[j].dot(&w);
            alpha.push(a);
            for _ in 0..2 {
                project_out(&mut w, deflate);
                project_out(&mut w, &q);
            }
            let b = w.norm();
            scale = scale.max(a.abs() + b);
            if j + 1 == m {
                break;
            }
            if b <= 1e-13 * scale.max(1e-300) {
                exhausted = true;
                break;
            }
            beta.push(b);
            q.push(w / b);
        }
        let dim = alpha.len();
        let mut t = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            t[(i, i)] = alpha[i];
            if i + 1 < dim {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let take = k.min(dim);
        let mut values = Vec::with_capacity(take);
        let mut vectors = Vec::with_capacity(take);
        let mut max_residual = 0.0_f64;
        for &c in order.iter().take(take) {
            let theta = eig.eigenvalues[c];
            let s = eig.eigenvectors.column(c);
            let mut y = DVector::zeros(n);
            for (i, qi) in q.iter().enumerate().take(dim) {
                y.axpy(s[i], qi, 1.0);
            }
            y /= y.norm();
            let r = (apply(&y) - &y * theta).norm() / theta.abs().max(1.0);
            max_residual = max_residual.max(r);
            values.push(theta);
            vectors.push(y);
        }
        if take == k && max_residual <= opts.tol {
            return Ok(EigenPairs {
                values,
                vectors,
                krylov_dim: dim,
                max_residual,
            });
        }
        last_residual = last_residual.min(max_residual);
        if dim >= avail || exhausted {
            return Err(Error::Numerical(format!(
                "Lanczos did not converge: {take}/{k} pairs, Krylov dimension {dim}, \
                 max relative residual {last_residual:e} > {:e}",
                opts.tol
            )));
        }
        // restart from the current best Ritz vectors
        start = vectors.iter().fold(DVector::zeros(n), |acc, v| acc + v);
        m = avail.min(2 * m);
        log::debug!("Lanczos restart with Krylov dimension {m} (residual {max_residual:e})");
    }
}

/// All eigenpairs of a dense symmetric matrix, descending.
pub fn dense_descending(a: DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let values = order.iter().map(|&c| eig.eigenvalues[c]).collect();
    let vectors = order
        .iter()
        .map(|&c| eig.eigenvectors.column(c).into_owned())
        .collect();
    (values, vectors)
}
