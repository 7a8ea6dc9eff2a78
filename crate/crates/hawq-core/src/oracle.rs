//! Independent verification oracles.
//!
//! These deliberately avoid the power-iteration and tape code paths so that
//! tests compare two unrelated routes to the same quantity.

/// All eigenvalues of a symmetric matrix (row-major, n x n) by the cyclic
/// Jacobi rotation method. Unsorted.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    let scale = a.iter().fold(1e-300f64, |m, &v| m.max(v.abs()));
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Eigenvalues sorted by descending magnitude.
pub fn eigenvalues_by_magnitude(matrix: &[f64], n: usize) -> Vec<f64> {
    let mut eigs = symmetric_eigenvalues(matrix, n);
    eigs.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());
    eigs
}

/// Dense matrix-vector product (row-major).
pub fn mat_vec(matrix: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| matrix[i * n..(i + 1) * n].iter().zip(v).map(|(&m, &x)| m * x).sum())
        .collect()
}
