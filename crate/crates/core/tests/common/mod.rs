//! Independent reference computations shared by the integration tests.
//!
//! Everything here avoids the library's own exponential, Gramian and bridge
//! code: exponentials come from nalgebra, Gramians from adaptive Simpson
//! quadrature, trajectories from classical RK4.

#![allow(dead_code)]

use bridgeflow::linalg::{Matrix, Vector};
use bridgeflow::samples::SampleSet;

pub fn expm(a: &Matrix, t: f64) -> Matrix {
    (a * t).exp()
}

fn gramian_integrand(a: &Matrix, bbt: &Matrix, s: f64) -> Matrix {
    let e = expm(a, s);
    &e * bbt * e.transpose()
}

/// `∫_0^t e^{sA} B B' e^{sA'} ds` by adaptive Simpson quadrature.
pub fn gramian_quadrature(a: &Matrix, b: &Matrix, t: f64, rel_tol: f64) -> Matrix {
    let bbt = b * b.transpose();
    if t == 0.0 {
        return Matrix::zeros(a.nrows(), a.nrows());
    }
    let f0 = gramian_integrand(a, &bbt, 0.0);
    let fm = gramian_integrand(a, &bbt, t / 2.0);
    let f1 = gramian_integrand(a, &bbt, t);
    let whole = (&f0 + &fm * 4.0 + &f1) * (t / 6.0);
    let tol = rel_tol * whole.norm().max(f64::MIN_POSITIVE);
    simpson(a, &bbt, 0.0, t, &f0, &fm, &f1, &whole, tol, 40)
}

#[allow(clippy::too_many_arguments)]
fn simpson(
    a: &Matrix,
    bbt: &Matrix,
    lo: f64,
    hi: f64,
    flo: &Matrix,
    fmid: &Matrix,
    fhi: &Matrix,
    whole: &Matrix,
    tol: f64,
    depth: usize,
) -> Matrix {
    let mid = 0.5 * (lo + hi);
    let fl = gramian_integrand(a, bbt, 0.5 * (lo + mid));
    let fr = gramian_integrand(a, bbt, 0.5 * (mid + hi));
    let h = hi - lo;
    let left = (flo + &fl * 4.0 + fmid) * (h / 12.0);
    let right = (fmid + &fr * 4.0 + fhi) * (h / 12.0);
    let both = &left + &right;
    let err = (&both - whole).norm();
    if depth == 0 || err <= 15.0 * tol {
        return &both + (&both - whole) / 15.0;
    }
    simpson(a, bbt, lo, mid, flo, &fl, fmid, &left, tol / 2.0, depth - 1)
        + simpson(a, bbt, mid, hi, fmid, &fr, fhi, &right, tol / 2.0, depth - 1)
}

/// Bridge coefficients at `t` from the quadrature Gramian:
/// mean `R x + S y`, covariance `Σ` (before the `ε²` factor).
pub struct BridgeOracle {
    pub r: Matrix,
    pub s: Matrix,
    pub sigma: Matrix,
}

pub fn bridge_oracle(a: &Matrix, b: &Matrix, t: f64) -> BridgeOracle {
    let phi_t = gramian_quadrature(a, b, t, 1e-13);
    let phi_1 = gramian_quadrature(a, b, 1.0, 1e-13);
    let e_t = expm(a, t);
    let e_rem = expm(a, 1.0 - t);
    let e_1 = expm(a, 1.0);
    let phi_1_inv = phi_1.try_inverse().expect("controllable system");
    let s = &phi_t * e_rem.transpose() * phi_1_inv;
    let r = &e_t - &s * &e_1;
    let sigma = &phi_t - &s * &e_rem * &phi_t;
    BridgeOracle {
        r,
        s,
        sigma: (&sigma + sigma.transpose()) * 0.5,
    }
}

/// Classical RK4 for `ẋ = f(t, x)` over the given time mesh.
pub fn rk4<F>(mesh: &[f64], x0: &Vector, mut f: F) -> Vector
where
    F: FnMut(f64, &Vector) -> Vector,
{
    let mut x = x0.clone();
    for w in mesh.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k1 = f(t, &x);
        let k2 = f(t + h / 2.0, &(&x + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&x + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// Uniform steps of `h` up to `1 - tail`, then geometric steps with ratio
/// `shrink` towards 1, ending exactly at `1 - stop`.
pub fn graded_mesh(h: f64, tail: f64, shrink: f64, stop: f64) -> Vec<f64> {
    let uniform = ((1.0 - tail) / h).round() as usize;
    let mut mesh: Vec<f64> = (0..=uniform).map(|k| k as f64 * h).collect();
    let mut rem = 1.0 - mesh[uniform];
    while rem * shrink > stop {
        rem *= shrink;
        mesh.push(1.0 - rem);
    }
    mesh.push(1.0 - stop);
    mesh
}

/// Local-linear kernel regression of `targets` on `inputs` at `query`, with
/// a Gaussian kernel of covariance `bandwidth² · whiten⁻¹`. Returns the
/// estimate and the effective sample size of the kernel weights.
pub fn local_linear(inputs: &SampleSet, targets: &SampleSet, query: &[f64], whiten: &Matrix, bandwidth: f64) -> (Vec<f64>, f64) {
    let n = inputs.dim();
    let p = n + 1;
    let mut gram = Matrix::zeros(p, p);
    let mut rhs = Matrix::zeros(p, targets.dim());
    let (mut sw, mut sw2) = (0.0, 0.0);
    let mut d = Vector::zeros(n);
    let mut feat = Vector::zeros(p);
    for (xi, yi) in inputs.rows().zip(targets.rows()) {
        for k in 0..n {
            d[k] = xi[k] - query[k];
        }
        let z = whiten * &d;
        let w = (-0.5 * z.norm_squared() / (bandwidth * bandwidth)).exp();
        if w < 1e-300 {
            continue;
        }
        sw += w;
        sw2 += w * w;
        feat[0] = 1.0;
        for k in 0..n {
            feat[k + 1] = z[k];
        }
        gram.ger(w, &feat, &feat, 1.0);
        for (j, yj) in yi.iter().enumerate() {
            for k in 0..p {
                rhs[(k, j)] += w * feat[k] * yj;
            }
        }
    }
    let coef = gram.lu().solve(&rhs).expect("regression design is nonsingular");
    (coef.row(0).iter().copied().collect(), sw * sw / sw2)
}

/// Mean and unbiased covariance of a point cloud.
pub fn moments(s: &SampleSet) -> (Vector, Matrix) {
    let n = s.dim();
    let count = s.len() as f64;
    let mut mean = Vector::zeros(n);
    for r in s.rows() {
        for k in 0..n {
            mean[k] += r[k];
        }
    }
    mean /= count;
    let mut cov = Matrix::zeros(n, n);
    for r in s.rows() {
        let d = Vector::from_column_slice(r) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    (mean, cov / (count - 1.0))
}

/// Largest deviation of sample moments from Gaussian moments, in standard
/// errors: `√(C_ii/N)` for the mean and `√((C_ii C_jj + C_ij²)/N)` for the
/// covariance entries.
pub fn moment_z_scores(sample: &SampleSet, mean: &Vector, cov: &Matrix) -> (f64, f64) {
    let (m, c) = moments(sample);
    let count = sample.len() as f64;
    let n = mean.len();
    let mut zm: f64 = 0.0;
    let mut zc: f64 = 0.0;
    for i in 0..n {
        let se = (cov[(i, i)] / count).sqrt();
        zm = zm.max((m[i] - mean[i]).abs() / se);
        for j in 0..n {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / count).sqrt();
            zc = zc.max((c[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    (zm, zc)
}
