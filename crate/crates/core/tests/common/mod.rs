//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use stable_bc::linalg::Mat;
use stable_bc::stability::SystemModel;

/// Coefficients `[c0, c1, .., c_{n-1}]` of the monic characteristic
/// polynomial `det(sI - A) = s^n + c_{n-1} s^{n-1} + .. + c0`, from the
/// Faddeev-LeVerrier recursion.
pub fn char_poly(a: &Mat) -> Vec<f64> {
    let n = a.rows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{n-k+1} I
        let mut next = a.matmul(&m).unwrap();
        for i in 0..n {
            next[(i, i)] += coeffs[n - k + 1];
        }
        m = next;
        let am = a.matmul(&m).unwrap();
        let tr: f64 = (0..n).map(|i| am[(i, i)]).sum();
        coeffs[n - k] = -tr / k as f64;
    }
    coeffs.truncate(n);
    coeffs
}

fn eval_monic(c: &[f64], s: Complex64) -> (Complex64, Complex64) {
    let n = c.len();
    let mut p = Complex64::new(1.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for k in (0..n).rev() {
        dp = dp * s + p;
        p = p * s + c[k];
    }
    (p, dp)
}

/// Roots of a monic polynomial by Durand-Kerner iteration followed by
/// Newton polishing.
pub fn poly_roots(c: &[f64]) -> Vec<Complex64> {
    let n = c.len();
    let radius = 1.0 + c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..n).map(|k| seed.powu(k as u32) * radius * 0.5).collect();
    for _ in 0..2000 {
        let mut delta = 0.0f64;
        for i in 0..n {
            let (p, _) = eval_monic(c, z[i]);
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() == 0.0 {
                z[i] += Complex64::new(1e-6, 1e-6);
                continue;
            }
            let step = p / denom;
            z[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 * radius {
            break;
        }
    }
    for r in &mut z {
        for _ in 0..5 {
            let (p, dp) = eval_monic(c, *r);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            if !step.re.is_finite() || !step.im.is_finite() {
                break;
            }
            *r -= step;
        }
        if r.im.abs() < 1e-13 * r.norm().max(1.0) {
            r.im = 0.0;
        }
    }
    z
}

pub fn char_poly_roots(a: &Mat) -> Vec<Complex64> {
    poly_roots(&char_poly(a))
}

/// Largest distance between paired elements of two multisets, pairing
/// greedily by nearest neighbor.
pub fn match_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// `sqrt(lambda_max(A^T A))` from the characteristic polynomial of the Gram
/// matrix.
pub fn spectral_norm_oracle(a: &Mat) -> f64 {
    let gram = a.tr_matmul(a).unwrap();
    let roots = poly_roots(&char_poly(&gram));
    roots.iter().map(|r| r.re).fold(0.0, f64::max).sqrt()
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn fd_gradient(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Index and detail of the first component where `analytic` and `numeric`
/// disagree beyond relative `rel`, with absolute `abs` allowed near zero.
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> Option<String> {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if err > abs && err > rel * scale {
            return Some(format!("component {i}: analytic {a:e}, numeric {n:e}, error {err:e}"));
        }
    }
    None
}

/// One classical Runge-Kutta step of `x' = f(t, x)`.
pub fn rk4_step(t: f64, x: &[f64], h: f64, f: &impl Fn(f64, &[f64]) -> Vec<f64>) -> Vec<f64> {
    let add = |a: &[f64], b: &[f64], s: f64| a.iter().zip(b).map(|(p, q)| p + s * q).collect::<Vec<_>>();
    let k1 = f(t, x);
    let k2 = f(t + h / 2.0, &add(x, &k1, h / 2.0));
    let k3 = f(t + h / 2.0, &add(x, &k2, h / 2.0));
    let k4 = f(t + h, &add(x, &k3, h));
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Matrix with independent uniform entries in `[-scale, scale]`.
pub fn random_mat<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

/// Gradient of a built loss with respect to `policy`'s parameters, in
/// `flat_params` order.
pub fn flat_gradient(policy: &stable_bc::policy::PolicyNetwork, eval: &stable_bc::stability::LossEval) -> Vec<f64> {
    let grads = eval.graph.backward(eval.total).unwrap();
    let shapes = policy.net.param_shapes();
    let mut out = Vec::new();
    for (slot, (r, c)) in shapes.into_iter().enumerate() {
        match grads.get(slot) {
            Some(g) => out.extend_from_slice(g.as_slice()),
            None => out.extend(std::iter::repeat(0.0).take(r * c)),
        }
    }
    out
}

/// Toy system with constant, non-trivial Jacobians.
pub fn constant_toy_model(d: usize) -> SystemModel {
    let fx = Mat::from_rows(&[[0.2, 1.0], [-0.5, 0.1]]);
    let fu = Mat::from_rows(&[[1.0, 0.3], [0.0, 1.0]]);
    let model = SystemModel::new(2, d, 2, move |_, _| (fx.clone(), fu.clone()));
    let gx = Mat::filled(d, 2, 0.3);
    let mut gy = Mat::identity(d).scale(-0.5);
    if d > 1 {
        gy[(0, 1)] = 0.4;
    }
    let gu = Mat::filled(d, 2, 0.1);
    model.with_env_dynamics(move |_, _, _| (gx.clone(), gy.clone(), gu.clone()))
}
