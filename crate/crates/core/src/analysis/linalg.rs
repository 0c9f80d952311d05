//! Small dense linear algebra for the analysis pipeline: symmetric
//! eigendecomposition (cyclic Jacobi), PCA, feature standardization, and
//! Cholesky factorization.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Eigenvalues/eigenvectors of a symmetric matrix by the cyclic Jacobi
/// method, sorted by descending eigenvalue. Columns of the returned matrix
/// are eigenvectors.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.dim().0;
    assert_eq!(a.dim().0, a.dim().1, "square matrix required");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    let scale = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    for _sweep in 0..100 {
        if off(&m) < 1e-13 * scale * n as f64 {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m[[i, i]], i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let values = Array1::from_iter(pairs.iter().map(|p| p.0));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new_col, (_, old_col)) in pairs.iter().enumerate() {
        for i in 0..n {
            vectors[[i, new_col]] = v[[i, *old_col]];
        }
        // Deterministic sign: largest-magnitude entry positive.
        let mut arg = 0;
        for i in 0..n {
            if vectors[[i, new_col]].abs() > vectors[[arg, new_col]].abs() {
                arg = i;
            }
        }
        if vectors[[arg, new_col]] < 0.0 {
            for i in 0..n {
                vectors[[i, new_col]] = -vectors[[i, new_col]];
            }
        }
    }
    (values, vectors)
}

/// Fitted PCA projection.
pub struct Pca {
    pub mean: Array1<f64>,
    /// (dim, components) projection matrix.
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

impl Pca {
    /// Fit on rows of `x` (n_samples, dim), keeping `components` directions.
    pub fn fit(x: &Array2<f64>, components: usize) -> Result<Pca> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::Analysis("pca needs at least 2 samples".into()));
        }
        let k = components.min(d);
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let (values, vectors) = symmetric_eigen(&cov);
        let mut proj = Array2::<f64>::zeros((d, k));
        for j in 0..k {
            for i in 0..d {
                proj[[i, j]] = vectors[[i, j]];
            }
        }
        Ok(Pca {
            mean,
            components: proj,
            explained_variance: values.slice(ndarray::s![..k]).to_owned(),
        })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean).dot(&self.components)
    }
}

/// Standardize each column to zero mean and unit variance in place.
/// Constant columns are left centered at zero.
pub fn standardize_columns(x: &mut Array2<f64>) {
    let (n, d) = x.dim();
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += x[[i, j]];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let c = x[[i, j]] - mean;
            var += c * c;
        }
        var /= n as f64;
        let std = var.sqrt().max(1e-12);
        for i in 0..n {
            x[[i, j]] = (x[[i, j]] - mean) / std;
        }
    }
}

/// Cholesky factor L (lower triangular) with `a = L L^T`.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.dim().0;
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Analysis(format!(
                        "cholesky failed at pivot {i} ({sum})"
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular L.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}
