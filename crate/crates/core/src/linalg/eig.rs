//! General real eigenproblem: Householder reduction to upper Hessenberg
//! form, Francis double-shift QR for the eigenvalues, and inverse iteration
//! on the shifted matrix for right (`A v = s v`) and left (`u^H A = s u^H`)
//! eigenvectors.

use std::cmp::Ordering;

use num_complex::Complex64;

use super::{LinalgError, Mat};

/// QR sweeps allowed per unit of dimension.
const SWEEPS_PER_DIM: usize = 100;
const INVERSE_ITERATION_STEPS: usize = 50;
/// `|u^H v|` below this (unit vectors) marks an eigenpair as near-defective.
pub const DEFECTIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EigenDecomp {
    /// Eigenvalues by descending real part, then descending imaginary part.
    pub values: Vec<Complex64>,
    /// Unit right eigenvectors, `right[i]` pairs with `values[i]`.
    pub right: Vec<Vec<Complex64>>,
    /// Unit left eigenvectors, `left[i]` pairs with `values[i]`.
    pub left: Vec<Vec<Complex64>>,
}

impl EigenDecomp {
    /// `|u_i^H v_i|` for the unit-normalized pair `i`.
    pub fn biorthogonality(&self, i: usize) -> f64 {
        cdot_conj(&self.left[i], &self.right[i]).norm()
    }

    pub fn is_near_defective(&self, i: usize) -> bool {
        self.biorthogonality(i) < DEFECTIVE_TOL
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Full decomposition with paired left and right eigenvectors.
pub fn eig_general(a: &Mat) -> Result<EigenDecomp, LinalgError> {
    let values = eigenvalues(a)?;
    let n = values.len();
    let scale = a.frobenius_norm();
    let mut right: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut left: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    for i in 0..n {
        let s = values[i];
        // The second member of a conjugate pair reuses the first's vectors.
        if i > 0 && s.im < 0.0 && values[i - 1] == s.conj() {
            let r = right[i - 1].iter().map(|z| z.conj()).collect();
            let l = left[i - 1].iter().map(|z| z.conj()).collect();
            right.push(r);
            left.push(l);
            continue;
        }
        right.push(inverse_iteration(a, s, false, scale));
        left.push(inverse_iteration(a, s, true, scale));
    }
    Ok(EigenDecomp {
        values,
        right,
        left,
    })
}

/// Eigenvalues only, sorted by descending real part then descending
/// imaginary part.
pub fn eigenvalues(a: &Mat) -> Result<Vec<Complex64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = OneBased::from_mat(a);
    hessenberg(&mut h);
    let mut values = match hqr(&mut h, SWEEPS_PER_DIM * n) {
        Ok(v) => v,
        Err((sweeps, mut partial)) => {
            sort_eigenvalues(&mut partial);
            return Err(LinalgError::NoConvergence { sweeps, partial });
        }
    };
    sort_eigenvalues(&mut values);
    Ok(values)
}

/// `sum_i max(0, Re s_i)` over the eigenvalues of `a`.
pub fn eig_penalty(a: &Mat) -> Result<f64, LinalgError> {
    Ok(eigenvalues(a)?.iter().map(|s| s.re.max(0.0)).sum())
}

/// Largest real part over the eigenvalues (the spectral abscissa).
pub fn spectral_abscissa(a: &Mat) -> Result<f64, LinalgError> {
    Ok(eigenvalues(a)?
        .first()
        .map_or(f64::NEG_INFINITY, |s| s.re))
}

/// Penalty value together with its derivative with respect to every entry
/// of `a`.
#[derive(Debug, Clone)]
pub struct PenaltyGradient {
    pub value: f64,
    pub grad: Mat,
    /// Eigenvalues contributing to the gradient.
    pub active: usize,
    /// An active eigenpair is near-defective or repeated, so the
    /// perturbation formula does not apply.
    pub degenerate: bool,
}

/// First-order perturbation of each eigenvalue gives
/// `d Re(s_i) / dA_jk = Re(conj(u_i)_j (v_i)_k / (u_i^H v_i))`; the
/// penalty derivative sums these over eigenvalues with positive real part.
pub fn eig_penalty_gradient(a: &Mat) -> Result<PenaltyGradient, LinalgError> {
    let n = a.rows();
    let scale = a.frobenius_norm();
    // Structural zeros come back from QR as +-eps * |A|; they are not active.
    let active_tol = 64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let values = eigenvalues(a)?;
    let value: f64 = values.iter().map(|s| s.re.max(0.0)).sum();
    let mut grad = Mat::zeros(n, n);
    if values.iter().all(|s| s.re <= active_tol) {
        return Ok(PenaltyGradient {
            value,
            grad,
            active: 0,
            degenerate: false,
        });
    }
    let decomp = eig_general(a)?;
    let cluster_tol = DEFECTIVE_TOL * scale.max(1.0);
    let mut active = 0;
    let mut degenerate = false;
    for (i, s) in decomp.values.iter().enumerate() {
        if s.re <= active_tol {
            continue;
        }
        active += 1;
        let repeated = decomp
            .values
            .iter()
            .enumerate()
            .any(|(j, t)| j != i && (s - t).norm() < cluster_tol);
        if repeated || decomp.is_near_defective(i) {
            degenerate = true;
            continue;
        }
        let u = &decomp.left[i];
        let v = &decomp.right[i];
        let denom = cdot_conj(u, v);
        for j in 0..n {
            let uj = u[j].conj();
            for k in 0..n {
                grad[(j, k)] += (uj * v[k] / denom).re;
            }
        }
    }
    Ok(PenaltyGradient {
        value,
        grad,
        active,
        degenerate,
    })
}

fn sort_eigenvalues(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap_or(Ordering::Equal)
            .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
    });
}

/// `sum conj(a_i) b_i`
pub(crate) fn cdot_conj(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Square work array addressed from 1, which keeps the QR sweep close to
/// its textbook index arithmetic.
struct OneBased {
    n: usize,
    data: Vec<f64>,
}

impl OneBased {
    fn from_mat(a: &Mat) -> Self {
        Self {
            n: a.rows(),
            data: a.as_slice().to_vec(),
        }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i - 1) * self.n + (j - 1)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[(i - 1) * self.n + (j - 1)] = v;
    }

    #[inline]
    fn sub(&mut self, i: usize, j: usize, v: f64) {
        self.data[(i - 1) * self.n + (j - 1)] -= v;
    }
}

/// Householder similarity reduction to upper Hessenberg form.
fn hessenberg(h: &mut OneBased) {
    let n = h.n;
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 1..=n - 2 {
        let len = n - k;
        let mut alpha = 0.0;
        for i in 0..len {
            let x = h.get(k + 1 + i, k);
            v[i] = x;
            alpha += x * x;
        }
        alpha = alpha.sqrt();
        if alpha == 0.0 {
            continue;
        }
        if v[0] > 0.0 {
            alpha = -alpha;
        }
        v[0] -= alpha;
        let vv: f64 = v[..len].iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        // A <- (I - 2 v v^T / v^T v) A
        for j in 1..=n {
            let s: f64 = (0..len).map(|i| v[i] * h.get(k + 1 + i, j)).sum();
            let f = 2.0 * s / vv;
            for i in 0..len {
                h.sub(k + 1 + i, j, f * v[i]);
            }
        }
        // A <- A (I - 2 v v^T / v^T v)
        for i in 1..=n {
            let s: f64 = (0..len).map(|j| h.get(i, k + 1 + j) * v[j]).sum();
            let f = 2.0 * s / vv;
            for j in 0..len {
                h.sub(i, k + 1 + j, f * v[j]);
            }
        }
        h.set(k + 1, k, alpha);
        for i in k + 2..=n {
            h.set(i, k, 0.0);
        }
    }
}

#[inline]
fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix. On failure returns
/// the sweep count and the eigenvalues deflated so far.
fn hqr(a: &mut OneBased, max_sweeps: usize) -> Result<Vec<Complex64>, (usize, Vec<Complex64>)> {
    let n = a.n;
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut anorm = 0.0;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm += a.get(i, j).abs();
        }
    }
    let mut nn = n as isize;
    let mut t = 0.0;
    let mut sweeps = 0usize;
    let (mut p, mut q, mut r, mut s, mut w, mut x, mut y, mut z): (f64, f64, f64, f64, f64, f64, f64, f64);
    while nn >= 1 {
        let mut its = 0usize;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 2 {
                s = a.get(l - 1, l - 1).abs() + a.get(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a.get(l, l - 1).abs() + s == s {
                    a.set(l, l - 1, 0.0);
                    break;
                }
                l -= 1;
            }
            x = a.get(nu, nu);
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
            } else {
                y = a.get(nu - 1, nu - 1);
                w = a.get(nu, nu - 1) * a.get(nu - 1, nu);
                if l == nu - 1 {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[nu - 1] = x + z;
                        wr[nu] = x + z;
                        if z != 0.0 {
                            wr[nu] = x - w / z;
                        }
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                } else {
                    if sweeps >= max_sweeps {
                        let partial = (nu + 1..=n)
                            .map(|i| Complex64::new(wr[i], wi[i]))
                            .collect();
                        return Err((sweeps, partial));
                    }
                    if its > 0 && its % 10 == 0 {
                        // Exceptional shift to break cycles.
                        t += x;
                        for i in 1..=nu {
                            a.sub(i, i, x);
                        }
                        s = a.get(nu, nu - 1).abs() + a.get(nu - 1, nu - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    sweeps += 1;
                    let mut m = nu - 2;
                    loop {
                        z = a.get(m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - w) / a.get(m + 1, m) + a.get(m, m + 1);
                        q = a.get(m + 1, m + 1) - z - r - s;
                        r = a.get(m + 2, m + 1);
                        s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a.get(m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs()
                            * (a.get(m - 1, m - 1).abs() + z.abs() + a.get(m + 1, m + 1).abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m + 2..=nu {
                        a.set(i, i - 2, 0.0);
                        if i != m + 2 {
                            a.set(i, i - 3, 0.0);
                        }
                    }
                    for k in m..nu {
                        if k != m {
                            p = a.get(k, k - 1);
                            q = a.get(k + 1, k - 1);
                            r = 0.0;
                            if k != nu - 1 {
                                r = a.get(k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a.set(k, k - 1, -a.get(k, k - 1));
                                }
                            } else {
                                a.set(k, k - 1, -s * x);
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nu {
                                p = a.get(k, j) + q * a.get(k + 1, j);
                                if k != nu - 1 {
                                    p += r * a.get(k + 2, j);
                                    a.sub(k + 2, j, p * z);
                                }
                                a.sub(k + 1, j, p * y);
                                a.sub(k, j, p * x);
                            }
                            let mmin = if nu < k + 3 { nu } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a.get(i, k) + y * a.get(i, k + 1);
                                if k != nu - 1 {
                                    p += z * a.get(i, k + 2);
                                    a.sub(i, k + 2, p * r);
                                }
                                a.sub(i, k + 1, p * q);
                                a.sub(i, k, p);
                            }
                        }
                    }
                }
            }
            if (l as isize) >= nn - 1 {
                break;
            }
        }
    }
    Ok((1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect())
}

/// Inverse iteration on `A - sI` (or `A^T - conj(s) I` for the left vector).
/// Returns a unit vector whose largest entry is real and positive.
fn inverse_iteration(a: &Mat, s: Complex64, adjoint: bool, scale: f64) -> Vec<Complex64> {
    let n = a.rows();
    let shift = if adjoint { s.conj() } else { s };
    let entry = |i: usize, j: usize| -> Complex64 {
        let v = if adjoint { a[(j, i)] } else { a[(i, j)] };
        let d = if i == j { shift } else { Complex64::new(0.0, 0.0) };
        Complex64::new(v, 0.0) - d
    };
    let shifted: Vec<Complex64> = (0..n * n).map(|k| entry(k / n, k % n)).collect();
    let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let lu = ComplexLu::factor(shifted.clone(), n, tiny);

    let mut v: Vec<Complex64> = (0..n)
        .map(|k| Complex64::new(1.0 + (k as f64 + 1.0) / (n as f64 + 1.0), 0.0))
        .collect();
    normalize(&mut v);
    let tol = 16.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) * (n as f64);
    for _ in 0..INVERSE_ITERATION_STEPS {
        let mut w = lu.solve(&v);
        if !normalize(&mut w) {
            break;
        }
        let residual: f64 = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| shifted[i * n + j] * w[j])
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .sum::<f64>()
            .sqrt();
        v = w;
        if residual <= tol {
            break;
        }
    }
    fix_phase(&mut v);
    v
}

fn normalize(v: &mut [Complex64]) -> bool {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for z in v.iter_mut() {
        *z /= norm;
    }
    true
}

fn fix_phase(v: &mut [Complex64]) {
    let Some(big) = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap_or(Ordering::Equal))
    else {
        return;
    };
    if big.norm() == 0.0 {
        return;
    }
    let phase = big.conj() / big.norm();
    for z in v.iter_mut() {
        *z *= phase;
    }
}

/// LU with partial pivoting; pivots smaller than `tiny` are replaced so the
/// factorization of an exactly singular shifted matrix stays usable.
struct ComplexLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
}

impl ComplexLu {
    fn factor(mut lu: Vec<Complex64>, n: usize, tiny: f64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv, _) = (k..n)
                .map(|i| (i, lu[i * n + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if piv != k {
                for j in 0..n {
                    lu.swap(k * n + j, piv * n + j);
                }
                perm.swap(k, piv);
            }
            if lu[k * n + k].norm() < tiny {
                lu[k * n + k] = Complex64::new(tiny, 0.0);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in k + 1..n {
                    let t = lu[k * n + j];
                    lu[i * n + j] -= f * t;
                }
            }
        }
        Self { n, lu, perm }
    }

    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let t = self.lu[i * n + j] * x[j];
                x[i] -= t;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let t = self.lu[i * n + j] * x[j];
                x[i] -= t;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}
