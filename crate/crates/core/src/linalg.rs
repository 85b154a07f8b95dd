//! Small dense helpers for the PCA teacher: a cyclic Jacobi eigensolver for
//! symmetric matrices, dot products and Gram-Schmidt.

/// Eigenpairs of a symmetric matrix, sorted by non-increasing eigenvalue.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi rotations on a row-major `n×n` symmetric matrix.
///
/// Only the upper triangle is read. Converges when the off-diagonal
/// Frobenius norm falls below `1e-15` of the full norm.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> SymmetricEigen {
    assert_eq!(matrix.len(), n * n, "matrix must be {n}x{n}");
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            a[i * n + j] = matrix[i * n + j];
            a[j * n + i] = matrix[i * n + j];
        }
    }
    // Rows of `vt` are the eigenvectors (columns of V).
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|v| v * v).sum();
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Annihilation is numerically exact once apq is negligible
                // against both diagonal entries.
                if apq.abs() <= f64::EPSILON * 1e-3 * (app.abs().min(aqq.abs())) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = arp - s * (arq + tau * arp);
                    let new_rq = arq + s * (arp - tau * arq);
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
                let (head, tail) = vt.split_at_mut(q * n);
                let vp = &mut head[p * n..(p + 1) * n];
                let vq = &mut tail[..n];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = xp - s * (xq + tau * xp);
                    *y = xq + s * (xp - tau * xq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    SymmetricEigen {
        values: order.iter().map(|&i| a[i * n + i]).collect(),
        vectors: order
            .iter()
            .map(|&i| vt[i * n..(i + 1) * n].to_vec())
            .collect(),
        sweeps,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4 * 4;
    for (x, y) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Modified Gram-Schmidt, applied twice for orthogonality to working
/// precision. Vectors that collapse are dropped.
pub fn orthonormalize(vectors: &mut Vec<Vec<f64>>) {
    for _ in 0..2 {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
        for mut v in vectors.drain(..) {
            for u in &out {
                let c = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= c * y;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
                out.push(v);
            }
        }
        *vectors = out;
    }
}
