//! Induced 2-norm with its top singular pair, and the closed-form bound on
//! robot-state drift under bounded environment shift.

use super::{dot, LinalgError, Mat};

const JACOBI_SWEEPS: usize = 60;
/// Top two singular values closer than this (relative) are treated as tied.
pub const SINGULAR_GAP_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub value: f64,
    /// Second largest singular value (0 when the matrix has rank <= 1 shape).
    pub second: f64,
    /// Unit left singular vector (length = rows).
    pub left: Vec<f64>,
    /// Unit right singular vector (length = cols).
    pub right: Vec<f64>,
}

impl SpectralNorm {
    /// True when the top singular value is not isolated, so `u v^T` is not a
    /// well-defined derivative.
    pub fn is_degenerate(&self) -> bool {
        self.value - self.second <= SINGULAR_GAP_TOL * self.value.max(f64::MIN_POSITIVE)
    }

    /// `d |A|_2 / dA = u v^T`.
    pub fn gradient(&self) -> Mat {
        let mut g = Mat::zeros(self.left.len(), self.right.len());
        for (i, &u) in self.left.iter().enumerate() {
            for (j, &v) in self.right.iter().enumerate() {
                g[(i, j)] = u * v;
            }
        }
        g
    }
}

/// Largest singular value, computed from a cyclic Jacobi eigensolve of the
/// smaller Gram matrix and refined as `|A v|`.
pub fn spectral_norm(a: &Mat) -> Result<SpectralNorm, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return Ok(SpectralNorm {
            value: 0.0,
            second: 0.0,
            left: vec![0.0; r],
            right: vec![0.0; c],
        });
    }
    let tall = r >= c;
    let gram = if tall { a.tr_matmul(a)? } else { a.matmul_tr(a)? };
    let (evals, evecs) = symmetric_eigen(&gram);
    // Largest and runner-up eigenvalues of the Gram matrix.
    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&i, &j| evals[j].total_cmp(&evals[i]));
    let top = order[0];
    let second = order
        .get(1)
        .map_or(0.0, |&k| evals[k].max(0.0).sqrt());
    let k = evals.len();
    let top_vec: Vec<f64> = (0..k).map(|i| evecs[(i, top)]).collect();

    let (mut left, mut right) = if tall {
        let u = a.matvec(&top_vec)?;
        (u, top_vec)
    } else {
        let v = a.transpose().matvec(&top_vec)?;
        (top_vec, v)
    };
    let value = if tall {
        dot(&left, &left).sqrt()
    } else {
        dot(&right, &right).sqrt()
    };
    if value > 0.0 {
        if tall {
            left.iter_mut().for_each(|x| *x /= value);
        } else {
            right.iter_mut().for_each(|x| *x /= value);
        }
    } else {
        left.iter_mut().for_each(|x| *x = 0.0);
        right.iter_mut().for_each(|x| *x = 0.0);
    }
    // Deterministic sign: largest right-vector entry positive.
    if let Some(big) = right
        .iter()
        .copied()
        .max_by(|x, y| x.abs().total_cmp(&y.abs()))
    {
        if big < 0.0 {
            left.iter_mut().for_each(|x| *x = -*x);
            right.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SpectralNorm {
        value,
        second: second.min(value),
        left,
        right,
    })
}

/// Cyclic Jacobi eigensolver for a small symmetric matrix. Returns the
/// eigenvalues and the matrix whose columns are the eigenvectors.
fn symmetric_eigen(s: &Mat) -> (Vec<f64>, Mat) {
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Mat::identity(n);
    let scale = a.frobenius_norm();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// Upper bound on `|e_x(t)|` when the environment shift stays within `eps`:
/// `(|A2| eps / |A1|) (exp(|A1| t) - 1)`.
pub fn covariate_bound(norm_a1: f64, norm_a2: f64, eps: f64, t: f64) -> Result<f64, LinalgError> {
    if !(norm_a1 > 0.0) || !norm_a1.is_finite() {
        return Err(LinalgError::Domain(format!(
            "|A1| must be positive and finite, got {norm_a1}"
        )));
    }
    if norm_a2 < 0.0 || eps < 0.0 || t < 0.0 {
        return Err(LinalgError::Domain(format!(
            "|A2|, eps and t must be nonnegative (got {norm_a2}, {eps}, {t})"
        )));
    }
    Ok(norm_a2 * eps / norm_a1 * (norm_a1 * t).exp_m1())
}
