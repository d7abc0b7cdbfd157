//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition,
//! PSD matrix square roots, and Gram-Schmidt orthonormalization. Matrices
//! here are tiny (channel or embedding dimension), so O(n^3) sweeps are fine.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Maximum allowed asymmetry |a_ij - a_ji| before an input is rejected.
const SYMMETRY_TOL: f64 = 1e-6;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns (eigenvalues, eigenvectors) with eigenvalues in descending order
/// and eigenvectors as the corresponding *columns* of the returned matrix.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::Dimension(format!("sym_eigen wants a square matrix, got {:?}", a.shape())));
    }
    let n = a.rows();
    for i in 0..n {
        for j in i + 1..n {
            if (a.at2(i, j) - a.at2(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Numeric(format!(
                    "matrix asymmetric at ({i},{j}): {} vs {}",
                    a.at2(i, j),
                    a.at2(j, i)
                )));
            }
        }
    }
    // Work on a symmetrized copy so tiny asymmetries cannot bias sweeps.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.at2(i, j) + a.at2(j, i));
        }
    }
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s
    };

    for _sweep in 0..100 {
        if off(&m) < 1e-24 * n as f64 {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apq = m[p * n + r];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[r * n + r];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J applied to rows/cols p and r.
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + r];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + r] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[r * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[r * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Tensor::zeros(vec![n, n]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.data_mut()[k * n + new_col] = q[k * n + old_col];
        }
    }
    Ok((values, vectors))
}

/// Square root of a symmetric PSD matrix; eigenvalues are clamped at zero so
/// slightly indefinite inputs (from floating-point noise) still work.
pub fn sym_matrix_sqrt(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let (vals, q) = sym_eigen(a)?;
    let mut out = Tensor::zeros(vec![n, n]);
    for (k, &lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let qik = q.at2(i, k) * s;
            for j in 0..n {
                out.data_mut()[i * n + j] += qik * q.at2(j, k);
            }
        }
    }
    Ok(out)
}

/// Orthonormalize the columns of `m` in place (modified Gram-Schmidt).
/// Degenerate columns (rank deficiency) are an error.
pub fn gram_schmidt_columns(m: &mut Tensor) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        for prev in 0..j {
            let mut proj = 0.0;
            for i in 0..rows {
                proj += m.at2(i, j) * m.at2(i, prev);
            }
            for i in 0..rows {
                let v = m.at2(i, prev);
                m.data_mut()[i * cols + j] -= proj * v;
            }
        }
        let mut norm = 0.0;
        for i in 0..rows {
            norm += m.at2(i, j) * m.at2(i, j);
        }
        norm = norm.sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric(format!("column {j} is linearly dependent")));
        }
        for i in 0..rows {
            m.data_mut()[i * cols + j] /= norm;
        }
    }
    Ok(())
}

/// Random matrix with orthonormal columns (Gaussian then Gram-Schmidt).
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if cols > rows {
        return Err(Error::Dimension(format!("cannot fit {cols} orthonormal columns in dimension {rows}")));
    }
    loop {
        let mut m = Tensor::randn(vec![rows, cols], 1.0, rng);
        if gram_schmidt_columns(&mut m).is_ok() {
            return Ok(m);
        }
    }
}

/// Top-r eigenvectors (columns) of a symmetric matrix.
pub fn top_eigenvectors(a: &Tensor, r: usize) -> Result<Tensor> {
    let n = a.rows();
    if r > n {
        return Err(Error::Dimension(format!("asked for {r} eigenvectors of a {n}x{n} matrix")));
    }
    let (_, q) = sym_eigen(a)?;
    let mut out = Tensor::zeros(vec![n, r]);
    for i in 0..n {
        for j in 0..r {
            out.data_mut()[i * r + j] = q.at2(i, j);
        }
    }
    Ok(out)
}
