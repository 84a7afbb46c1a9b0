//! Dense symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix
//! square root built on it. Everything here runs in f64: the proxy-FID
//! trace term is a difference of same-magnitude quantities and float32
//! drift would swamp it.

use ndarray::Array2;

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigendecomposition of a symmetric matrix: `a = v · diag(eig) · vᵀ` with
/// orthonormal eigenvector columns in `v`. Cyclic Jacobi sweeps until the
/// off-diagonal mass is negligible relative to the matrix norm.
pub fn sym_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = 1.0 + frobenius(&m);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::EPSILON * scale {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // m ← jᵀ m j for the Givens rotation j in the (p, q) plane.
                for k in 0..n {
                    let akp = m[[k, p]];
                    let akq = m[[k, q]];
                    m[[k, p]] = c * akp - s * akq;
                    m[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[[p, k]];
                    let aqk = m[[q, k]];
                    m[[p, k]] = c * apk - s * aqk;
                    m[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[[i, i]]).collect();
    (eig, v)
}

/// Symmetric PSD square root: eigenvalues are clamped at zero before the
/// square root so tiny negative round-off cannot produce NaN.
pub fn sqrt_psd(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let (eig, v) = sym_eigen(a);
    let mut out = Array2::<f64>::zeros((n, n));
    for (idx, &lambda) in eig.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * v[[i, idx]] * v[[j, idx]];
            }
        }
    }
    out
}

/// `tr((a·b)^½)` for symmetric PSD `a`, `b`, computed on the symmetrized
/// product `√a · b · √a` (same eigenvalues as `a·b`, but symmetric, so the
/// Jacobi solver applies).
pub fn trace_sqrt_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let s = sqrt_psd(a);
    let m = s.dot(b).dot(&s);
    let m = 0.5 * (&m + &m.t());
    let (eig, _) = sym_eigen(&m);
    eig.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_a_known_spectrum() {
        // Rotate diag(5, 2, -1) by a fixed orthogonal matrix and recover it.
        let theta = 0.7f64;
        let (c, s) = (theta.cos(), theta.sin());
        let r = ndarray::arr2(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        let d = Array2::from_diag(&ndarray::arr1(&[5.0, 2.0, -1.0]));
        let a = r.dot(&d).dot(&r.t());
        let (mut eig, v) = sym_eigen(&a);
        eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (got, want) in eig.iter().zip([-1.0, 2.0, 5.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        // Reconstruction: v diag v' = a.
        let (eig, _) = sym_eigen(&a);
        let rebuilt = v.dot(&Array2::from_diag(&ndarray::arr1(&eig))).dot(&v.t());
        for (x, y) in rebuilt.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let a = ndarray::arr2(&[[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]]);
        let s = sqrt_psd(&a);
        let sq = s.dot(&s);
        for (x, y) in sq.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn trace_sqrt_product_matches_diagonal_closed_form() {
        let a = Array2::from_diag(&ndarray::arr1(&[1.0, 4.0]));
        let b = Array2::from_diag(&ndarray::arr1(&[4.0, 1.0]));
        // (a·b)^½ = diag(2, 2) → trace 4.
        assert!((trace_sqrt_product(&a, &b) - 4.0).abs() < 1e-10);
    }
}
