//! Small dense vector and matrix helpers on `f64` slices.
//!
//! Points live in flat buffers (`&[f64]` of length n), so everything here is
//! allocation-free where it matters. Dimensions are tiny (n <= 8); nothing
//! here is meant for large systems.

/// Dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm2(a).sqrt()
}

/// Squared Euclidean distance.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

/// out = a - b.
#[inline]
pub fn sub(a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = a[i] - b[i];
    }
}

/// out += t * v.
#[inline]
pub fn axpy(t: f64, v: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] += t * v[i];
    }
}

/// out *= t.
#[inline]
pub fn scale(t: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x *= t;
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// `m` is row-major n x n and must be symmetric. Returns `(values, vectors)`
/// with `vectors[k]` the unit eigenvector for `values[k]`, sorted descending
/// by eigenvalue. Deterministic: fixed sweep order, fixed iteration budget.
pub fn symmetric_eigen(m: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    debug_assert_eq!(m.len(), n * n);
    let mut a = m.to_vec();
    // v starts as identity and accumulates the rotations (columns = eigvecs).
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    let tol = 1e-15 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
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
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&c| (0..n).map(|r| v[r * n + c]).collect())
        .collect();
    (values, vectors)
}

/// Modified Gram-Schmidt. Returns None if the inputs are numerically
/// dependent (residual below `tol` times the input norm).
pub fn orthonormalize(vectors: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        let input_norm = norm(v).max(1e-300);
        for u in &out {
            let t = dot(&w, u);
            axpy(-t, u, &mut w);
        }
        // second pass for numerical orthogonality
        for u in &out {
            let t = dot(&w, u);
            axpy(-t, u, &mut w);
        }
        let r = norm(&w);
        if r <= tol * input_norm {
            return None;
        }
        scale(1.0 / r, &mut w);
        out.push(w);
    }
    Some(out)
}

/// Largest magnitude eigenvalue of a symmetric matrix (operator norm).
pub fn symmetric_opnorm(m: &[f64], n: usize) -> f64 {
    let (values, _) = symmetric_eigen(m, n);
    values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_diagonal() {
        let m = [3.0, 0.0, 0.0, -1.0];
        let (vals, vecs) = symmetric_eigen(&m, 2);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] + 1.0).abs() < 1e-12);
        assert!(vecs[0][0].abs() > 0.999);
        assert!(vecs[1][1].abs() > 0.999);
    }

    #[test]
    fn eigen_rotated() {
        // eigenvalues 2 and 0.5 under a 30 degree rotation
        let (c, s) = (0.75f64.sqrt(), 0.5f64);
        let (l1, l2) = (2.0, 0.5);
        let m = [
            c * c * l1 + s * s * l2,
            c * s * (l1 - l2),
            c * s * (l1 - l2),
            s * s * l1 + c * c * l2,
        ];
        let (vals, vecs) = symmetric_eigen(&m, 2);
        assert!((vals[0] - 2.0).abs() < 1e-12);
        assert!((vals[1] - 0.5).abs() < 1e-12);
        let v = &vecs[0];
        assert!((v[0].abs() - c).abs() < 1e-10);
        assert!((v[1].abs() - s).abs() < 1e-10);
    }

    #[test]
    fn eigen_3x3() {
        // symmetric with known spectrum {6, 3, 1} (hand-built)
        let q = [
            [2.0 / 3.0, -2.0 / 3.0, 1.0 / 3.0],
            [2.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0],
            [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0],
        ];
        let d = [6.0, 3.0, 1.0];
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += q[i][k] * d[k] * q[j][k];
                }
                m[i * 3 + j] = s;
            }
        }
        let (vals, vecs) = symmetric_eigen(&m, 3);
        assert!((vals[0] - 6.0).abs() < 1e-10);
        assert!((vals[1] - 3.0).abs() < 1e-10);
        assert!((vals[2] - 1.0).abs() < 1e-10);
        for k in 0..3 {
            // residual || M v - lambda v ||
            let v = &vecs[k];
            for i in 0..3 {
                let mut mv = 0.0;
                for j in 0..3 {
                    mv += m[i * 3 + j] * v[j];
                }
                assert!((mv - vals[k] * v[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gram_schmidt_rejects_dependent() {
        let vs = vec![vec![1.0, 0.0], vec![2.0, 1e-14]];
        assert!(orthonormalize(&vs, 1e-10).is_none());
        let vs = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let q = orthonormalize(&vs, 1e-10).unwrap();
        assert!(dot(&q[0], &q[1]).abs() < 1e-12);
        assert!((norm(&q[1]) - 1.0).abs() < 1e-12);
    }
}
