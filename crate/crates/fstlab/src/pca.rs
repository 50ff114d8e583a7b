//! Principal component projection via power iteration with deflation.
//!
//! Small feature spaces (tens of dimensions) and a handful of requested
//! components make power iteration plenty: build the covariance once,
//! then iterate v <- Cv / |Cv| per component and deflate. Convergence
//! tolerance and the component sign convention are fixed so projections
//! are reproducible across runs and platforms.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Iteration stops when successive unit vectors differ by less than this.
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
/// An eigenvalue at or below this fraction of the leading one counts as
/// zero variance: the data has run out of directions.
const RANK_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// [n, k] sample coordinates in component space.
    pub coords: Tensor,
    /// [k, d] unit-norm components, leading first.
    pub components: Tensor,
    /// Variance captured by each component, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// True when fewer than the requested components carried variance;
    /// `coords`/`components` then hold only the usable ones.
    pub rank_deficient: bool,
}

/// Project [n, d] feature rows onto their top `dims` principal components.
///
/// Rows are centered first. Each component's sign is normalized so its
/// largest-magnitude loading is positive (ties to the lower index).
pub fn pca_project(features: &Tensor, dims: usize) -> Result<PcaProjection> {
    if features.shape().len() != 2 {
        return Err(Error::input(format!("features must be [n, d], got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if dims == 0 || dims > d {
        return Err(Error::input(format!("dims must be in 1..={d}, got {dims}")));
    }
    if n <= dims {
        return Err(Error::input(format!(
            "pca needs more samples than requested components, got n={n} for dims={dims}"
        )));
    }

    // Center.
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = features.clone();
    for i in 0..n {
        let row = &mut centered.data_mut()[i * d..(i + 1) * d];
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    // Covariance, explicit [d, d].
    let mut cov = centered.matmul_tn(&centered);
    cov.scale(1.0 / (n - 1) as f64);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut rank_deficient = false;
    for _ in 0..dims {
        let (lambda, v) = leading_eigenpair(&cov, d);
        let leading = *eigenvalues.first().unwrap_or(&lambda);
        if lambda <= RANK_REL_TOL * leading.max(1.0) {
            rank_deficient = true;
            break;
        }
        // Deflate: C <- C - lambda v v^T.
        for i in 0..d {
            for j in 0..d {
                cov.data_mut()[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    if components.is_empty() {
        return Err(Error::numeric("features have zero variance; no principal directions exist"));
    }

    let k = components.len();
    let comp_tensor = Tensor::from_vec(
        &[k, d],
        components.into_iter().flatten().collect(),
    )?;
    let coords = centered.matmul_nt(&comp_tensor);
    Ok(PcaProjection { coords, components: comp_tensor, eigenvalues, rank_deficient })
}

/// Largest eigenpair of a symmetric PSD matrix by power iteration.
fn leading_eigenpair(cov: &Tensor, d: usize) -> (f64, Vec<f64>) {
    // Deterministic start: the basis vector of the largest diagonal entry.
    // If that direction is orthogonal to the leading eigenvector the
    // iteration stalls at a smaller eigenpair; cycling start vectors on
    // non-convergence covers that corner.
    let mut start = 0;
    for i in 1..d {
        if cov.data()[i * d + i] > cov.data()[start * d + start] {
            start = i;
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for attempt in 0..d {
        let mut v = vec![0.0; d];
        v[(start + attempt) % d] = 1.0;
        let mut converged = false;
        for _ in 0..POWER_MAX_ITERS {
            let mut next = vec![0.0; d];
            for i in 0..d {
                let row = &cov.data()[i * d..(i + 1) * d];
                next[i] = row.iter().zip(&v).map(|(c, x)| c * x).sum();
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                // v is in the null space; the matrix may still be nonzero
                // elsewhere, so try the next start vector.
                break;
            }
            for x in &mut next {
                *x /= norm;
            }
            let diff: f64 =
                next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = next;
            if diff < POWER_TOL {
                converged = true;
                break;
            }
        }
        // Rayleigh quotient (v is unit norm).
        let mut cv = vec![0.0; d];
        for i in 0..d {
            cv[i] = cov.data()[i * d..(i + 1) * d].iter().zip(&v).map(|(c, x)| c * x).sum();
        }
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
        let better = best.as_ref().map_or(true, |(l, _)| lambda > *l);
        if better {
            best = Some((lambda, v));
        }
        if converged && lambda > 0.0 {
            break;
        }
    }
    let (lambda, mut v) = best.expect("at least one start vector attempted");

    // Sign convention: the largest-magnitude loading is positive.
    let mut pivot = 0;
    for i in 1..d {
        if v[i].abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    (lambda.max(0.0), v)
}

/// Write projected coordinates alongside labels and poison flags:
/// `index,trueLabel,isBackdoor,pc1,pc2,...` with one row per sample.
pub fn write_pca_csv(
    path: &Path,
    projection: &PcaProjection,
    labels: &[usize],
    is_backdoor: &[bool],
) -> Result<()> {
    let n = projection.coords.shape()[0];
    if labels.len() != n || is_backdoor.len() != n {
        return Err(Error::input(format!(
            "projection has {n} rows but {} labels and {} flags",
            labels.len(),
            is_backdoor.len()
        )));
    }
    let k = projection.coords.shape()[1];
    let mut out = String::from("index,trueLabel,isBackdoor");
    for j in 0..k {
        out.push_str(&format!(",pc{}", j + 1));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{i},{},{}", labels[i], u8::from(is_backdoor[i])));
        for v in projection.coords.row(i) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
