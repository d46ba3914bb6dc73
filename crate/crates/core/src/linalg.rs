//! Small dense symmetric eigendecomposition (cyclic Jacobi) used by the PCA
//! overlays and the Fréchet diagnostic.

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix, A = V diag(w) V^T.
/// Returns eigenvalues ascending with matching eigenvector columns
/// (v[i * n + j] is component i of eigenvector j).
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::contract(format!(
            "expected {n}x{n} matrix, got {} elements",
            a.len()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs()
                > 1e-8 * (1.0 + a[i * n + j].abs().max(a[j * n + i].abs()))
            {
                return Err(Error::contract("matrix is not symmetric"));
            }
        }
        if !a[i * n + i].is_finite() {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
    }

    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * norm;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).expect("finite eigenvalues"));
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs[i * n + new_j] = v[i * n + old_j];
        }
    }
    Ok((eigvals, eigvecs))
}

/// C = A * B for square row-major matrices.
pub fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (rounding) clamp to zero.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (w, v) = jacobi_eigh(a, n)?;
    let mut out = vec![0.0; n * n];
    for (j, &lam) in w.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = v[i * n + j] * s;
            for k in 0..n {
                out[i * n + k] += vi * v[k * n + j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::stream(seed, "sym", &[]);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = r.gen::<f64>() * 2.0 - 1.0;
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    #[test]
    fn eigh_reconstructs_and_is_orthonormal() {
        for n in [1, 2, 5, 12] {
            let a = random_symmetric(n, n as u64);
            let (w, v) = jacobi_eigh(&a, n).unwrap();
            // A v_j = w_j v_j
            for j in 0..n {
                for i in 0..n {
                    let mut av = 0.0;
                    for k in 0..n {
                        av += a[i * n + k] * v[k * n + j];
                    }
                    assert!(
                        (av - w[j] * v[i * n + j]).abs() < 1e-9,
                        "residual at n={n}, ({i},{j})"
                    );
                }
            }
            // V^T V = I
            for j1 in 0..n {
                for j2 in 0..n {
                    let dot: f64 = (0..n).map(|i| v[i * n + j1] * v[i * n + j2]).sum();
                    let want = if j1 == j2 { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
            // ascending
            for j in 1..n {
                assert!(w[j] >= w[j - 1]);
            }
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        // build a PSD matrix B = A^T A
        let n = 6;
        let a = random_symmetric(n, 99);
        let b = matmul_square(&a, &a, n); // symmetric PSD since A symmetric
        let s = sqrtm_psd(&b, n).unwrap();
        let ss = matmul_square(&s, &s, n);
        for (x, y) in ss.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert!(jacobi_eigh(&a, 2).is_err());
    }
}
