//! Symmetric 3×3 eigendecomposition by cyclic Jacobi rotations.

pub type Mat3 = [[f64; 3]; 3];

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub values: [f64; 3],
    /// `vectors[k]` belongs to `values[k]`.
    pub vectors: [[f64; 3]; 3],
}

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix (only the upper triangle is
/// read). Each eigenvector is oriented so that its largest-magnitude
/// component is non-negative, the first such component winning ties.
pub fn eig3_sym(m: &Mat3) -> EigenSystem {
    let mut a = [[m[0][0], m[0][1], m[0][2]], [m[0][1], m[1][1], m[1][2]], [m[0][2], m[1][2], m[2][2]]];
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _ in 0..MAX_SWEEPS {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off == 0.0 || off <= 1e-36 * diag {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- Jᵀ A J, V <- V J with J the (p, q) Givens rotation.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (k, &i) in order.iter().enumerate() {
        values[k] = a[i][i];
        let mut e = [v[0][i], v[1][i], v[2][i]];
        let mut big = 0;
        for j in 1..3 {
            if e[j].abs() > e[big].abs() {
                big = j;
            }
        }
        if e[big] < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
        vectors[k] = e;
    }
    EigenSystem { values, vectors }
}
