//! Closed-form flow-matching feedback for a Gaussian initial law and a
//! Gaussian-mixture target.
//!
//! Writing the bridge marginal as `X^z_t = R_t x + S_t y + ε Σ_t^{1/2} Z`, the
//! pair `(y, X^z_t)` is jointly a Gaussian mixture, so `E[y | X^z_t = ξ]` is a
//! responsibility-weighted sum of per-component Gaussian conditionals:
//!
//! ```text
//! C_l  = R_t Q_0 R_t' + S_t Q_l S_t' + ε² Σ_t
//! K_l  = Q_l S_t' C_l^{-1}
//! r_l  = ξ - R_t m_0 - S_t m_l
//! w'_l ∝ w_l |C_l|^{-1/2} exp(-½ r_l' C_l^{-1} r_l)
//! E[y | ξ] = Σ w'_l (m_l + K_l r_l) / Σ w'_l
//! ```
//!
//! The feedback then reuses the bridge gain with `y` replaced by that
//! posterior mean.

use std::sync::Arc;

use crate::distributions::GaussianMixture;
use crate::error::{Error, Result};
use crate::linalg::{self, FlatMatrix, Matrix, PsdMatrix, Vector};
use crate::systems::BridgeKernel;

#[derive(Debug, Clone)]
pub struct MixtureLawContext {
    kernel: Arc<BridgeKernel>,
    m0: Vector,
    q0: PsdMatrix,
    target: GaussianMixture,
}

#[derive(Debug, Clone)]
struct ComponentSlice {
    /// `ln w_l - ½ ln |C_l|`; `-inf` for zero-weight components.
    log_weight: f64,
    mean: Vec<f64>,
    /// `R_t m_0 + S_t m_l`
    offset: Vec<f64>,
    cov_inv: FlatMatrix,
    gain: FlatMatrix,
}

/// Everything the law needs at one (clamped) time, flattened for hot loops.
#[derive(Debug, Clone)]
pub struct MixtureSlice {
    t: f64,
    n: usize,
    bridge_gain: FlatMatrix,
    exp_rem: FlatMatrix,
    comps: Vec<ComponentSlice>,
}

/// Reusable buffers for [`MixtureSlice`] evaluations.
#[derive(Debug, Clone, Default)]
pub struct MixtureScratch {
    resid: Vec<f64>,
    tmp: Vec<f64>,
    logw: Vec<f64>,
    yhat: Vec<f64>,
}

impl MixtureLawContext {
    /// `p0` must be a single Gaussian.
    pub fn new(kernel: Arc<BridgeKernel>, p0: &GaussianMixture, target: GaussianMixture) -> Result<Self> {
        let [c0] = p0.components() else {
            return Err(Error::invalid(format!(
                "closed-form law needs a single-Gaussian P0, got {} components",
                p0.components().len()
            )));
        };
        let n = kernel.n();
        if p0.dim() != n || target.dim() != n {
            return Err(Error::dim(format!(
                "P0 ({}) and P1 ({}) must match the state dimension {n}",
                p0.dim(),
                target.dim()
            )));
        }
        Ok(MixtureLawContext {
            kernel,
            m0: c0.mean.clone(),
            q0: c0.cov.clone(),
            target,
        })
    }

    pub fn kernel(&self) -> &Arc<BridgeKernel> {
        &self.kernel
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    pub fn initial(&self) -> (&Vector, &PsdMatrix) {
        (&self.m0, &self.q0)
    }

    /// Precomputes the per-component gains and covariances at `min(t, 1 - δ)`.
    pub fn slice(&self, t: f64) -> Result<MixtureSlice> {
        let tc = self.kernel.clamp(t);
        let node = self.kernel.node(tc)?;
        let gain = self.kernel.gain(tc)?;
        let eps2 = self.kernel.epsilon().powi(2);
        let (r, s) = (&node.r, &node.s);
        let base = r * self.q0.as_matrix() * r.transpose() + node.sigma.as_matrix() * eps2;
        let r_m0 = r * &self.m0;
        let comps = self
            .target
            .components()
            .iter()
            .map(|c| {
                let cov = PsdMatrix::from_symmetric_part(&(&base + s * c.cov.as_matrix() * s.transpose()));
                let chol = linalg::spd_factor(&cov)?;
                let k = chol.solve(&(s * c.cov.as_matrix())).transpose();
                let log_weight = if c.weight > 0.0 {
                    c.weight.ln() - 0.5 * linalg::log_det(&chol)
                } else {
                    f64::NEG_INFINITY
                };
                Ok(ComponentSlice {
                    log_weight,
                    mean: c.mean.iter().copied().collect(),
                    offset: (&r_m0 + s * &c.mean).iter().copied().collect(),
                    cov_inv: FlatMatrix::from(&chol.inverse()),
                    gain: FlatMatrix::from(&k),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureSlice {
            t: tc,
            n: self.kernel.n(),
            bridge_gain: FlatMatrix::from(gain.as_ref()),
            exp_rem: FlatMatrix::from(&node.exp_rem),
            comps,
        })
    }

    fn check(&self, xi: &Vector) -> Result<()> {
        if xi.len() != self.kernel.n() {
            return Err(Error::dim(format!(
                "state has dimension {}, law expects {}",
                xi.len(),
                self.kernel.n()
            )));
        }
        Ok(())
    }

    /// `E[y | X^z_t = ξ]`.
    pub fn posterior_mean_y(&self, t: f64, xi: &Vector) -> Result<Vector> {
        self.check(xi)?;
        let slice = self.slice(t)?;
        let mut out = vec![0.0; self.kernel.n()];
        slice.posterior_mean(xi.as_slice(), &mut MixtureScratch::default(), &mut out)?;
        Ok(Vector::from_vec(out))
    }

    /// Normalized responsibilities `w'_l / Σ w'_l`.
    pub fn responsibilities(&self, t: f64, xi: &Vector) -> Result<Vec<f64>> {
        self.check(xi)?;
        let slice = self.slice(t)?;
        let mut scratch = MixtureScratch::default();
        slice.log_responsibilities(xi.as_slice(), &mut scratch)?;
        Ok(scratch.logw.iter().map(|l| l.exp()).collect())
    }

    /// Closed-form feedback `k̄(t, ξ)`.
    pub fn mixture_feedback(&self, t: f64, xi: &Vector) -> Result<Vector> {
        self.check(xi)?;
        let slice = self.slice(t)?;
        let mut out = vec![0.0; self.kernel.m()];
        slice.feedback(xi.as_slice(), &mut MixtureScratch::default(), &mut out)?;
        Ok(Vector::from_vec(out))
    }
}

impl MixtureSlice {
    /// Clamped time this slice was built for.
    pub fn time(&self) -> f64 {
        self.t
    }

    fn prepare(&self, scratch: &mut MixtureScratch) {
        let n = self.n;
        scratch.resid.resize(n, 0.0);
        scratch.tmp.resize(n, 0.0);
        scratch.yhat.resize(n, 0.0);
        scratch.logw.resize(self.comps.len(), 0.0);
    }

    /// Leaves normalized log-responsibilities in `scratch.logw`.
    fn log_responsibilities(&self, xi: &[f64], scratch: &mut MixtureScratch) -> Result<()> {
        self.prepare(scratch);
        let mut max = f64::NEG_INFINITY;
        for (l, c) in self.comps.iter().enumerate() {
            for ((r, x), o) in scratch.resid.iter_mut().zip(xi).zip(&c.offset) {
                *r = x - o;
            }
            let lw = c.log_weight - 0.5 * c.cov_inv.quad_form(&scratch.resid);
            scratch.logw[l] = lw;
            max = max.max(lw);
        }
        if !max.is_finite() {
            return Err(Error::Degenerate(format!(
                "no mixture component has positive responsibility at t = {}",
                self.t
            )));
        }
        let total: f64 = scratch.logw.iter().map(|lw| (lw - max).exp()).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate(format!("responsibilities underflow at t = {}", self.t)));
        }
        let log_total = max + total.ln();
        for lw in &mut scratch.logw {
            *lw -= log_total;
        }
        Ok(())
    }

    pub fn posterior_mean(&self, xi: &[f64], scratch: &mut MixtureScratch, out: &mut [f64]) -> Result<()> {
        self.log_responsibilities(xi, scratch)?;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (l, c) in self.comps.iter().enumerate() {
            let w = scratch.logw[l].exp();
            if w == 0.0 {
                continue;
            }
            for ((r, x), o) in scratch.resid.iter_mut().zip(xi).zip(&c.offset) {
                *r = x - o;
            }
            c.gain.apply(&scratch.resid, &mut scratch.tmp);
            for ((o, m), kr) in out.iter_mut().zip(&c.mean).zip(&scratch.tmp) {
                *o += w * (m + kr);
            }
        }
        Ok(())
    }

    pub fn feedback(&self, xi: &[f64], scratch: &mut MixtureScratch, out: &mut [f64]) -> Result<()> {
        let mut yhat = std::mem::take(&mut scratch.yhat);
        yhat.resize(self.n, 0.0);
        self.posterior_mean(xi, scratch, &mut yhat)?;
        self.exp_rem.apply(xi, &mut scratch.tmp);
        for (y, e) in yhat.iter_mut().zip(&scratch.tmp) {
            *y -= e;
        }
        self.bridge_gain.apply(&yhat, out);
        scratch.yhat = yhat;
        Ok(())
    }
}

/// Direct single-Gaussian conditional `m_1 + Q_1 S' C^{-1} (ξ - R m_0 - S m_1)`,
/// computed with an explicit inverse. Used to cross-check the mixture path.
pub fn gaussian_posterior_mean(
    kernel: &BridgeKernel,
    m0: &Vector,
    q0: &Matrix,
    m1: &Vector,
    q1: &Matrix,
    t: f64,
    xi: &Vector,
) -> Result<Vector> {
    let node = kernel.node(kernel.clamp(t))?;
    let (r, s) = (&node.r, &node.s);
    let c = r * q0 * r.transpose() + s * q1 * s.transpose() + node.sigma.as_matrix() * kernel.epsilon().powi(2);
    let inv = c
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("conditional covariance not invertible".into()))?;
    Ok(m1 + q1 * s.transpose() * inv * (xi - r * m0 - s * m1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::bridge_gain;
    use crate::distributions::GaussianComponent;
    use crate::systems::{build_kernel, builtin_system, LinearSystem};

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn std_gauss(n: usize) -> GaussianMixture {
        GaussianMixture::gaussian(Vector::zeros(n), PsdMatrix::identity(n)).unwrap()
    }

    fn brownian(eps: f64) -> Arc<BridgeKernel> {
        let sys = LinearSystem::new("bm", Matrix::zeros(2, 2), Matrix::identity(2, 2), eps).unwrap();
        Arc::new(build_kernel(sys, 101, 1e-3).unwrap())
    }

    #[test]
    fn gaussian_to_gaussian_scalar_conditioning() {
        let ctx = MixtureLawContext::new(brownian(0.0), &std_gauss(2), std_gauss(2)).unwrap();
        let xi = v(&[0.8, -1.3]);
        for &t in &[0.1f64, 0.25, 0.5, 0.77, 0.9] {
            let factor = t / ((1.0 - t).powi(2) + t * t);
            let got = ctx.posterior_mean_y(t, &xi).unwrap();
            assert!((got - &xi * factor).norm() < 1e-12, "t={t}");
            let k = ctx.mixture_feedback(t, &xi).unwrap();
            let want = &xi * ((factor - 1.0) / (1.0 - t));
            assert!((k - want).norm() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn point_mass_target_reduces_to_bridge_gain() {
        let kernel = Arc::new(build_kernel(builtin_system("double_integrator").unwrap(), 101, 1e-3).unwrap());
        let p0 = GaussianMixture::gaussian(Vector::zeros(2), PsdMatrix::zeros(2)).unwrap();
        let m1 = v(&[2.0, -1.0]);
        let p1 = GaussianMixture::gaussian(m1.clone(), PsdMatrix::zeros(2)).unwrap();
        let ctx = MixtureLawContext::new(kernel.clone(), &p0, p1).unwrap();
        let xi = v(&[0.5, 0.5]);
        for &t in &[0.2, 0.5, 0.8] {
            let k = ctx.mixture_feedback(t, &xi).unwrap();
            let b = bridge_gain(&kernel, t, &xi, &m1).unwrap();
            assert!((&k - &b).norm() < 1e-10 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn symmetric_mixture_equal_responsibilities() {
        let comp = |m: [f64; 2]| {
            GaussianComponent::new(0.5, v(&m), PsdMatrix::new(Matrix::identity(2, 2) * 0.3).unwrap()).unwrap()
        };
        let target = GaussianMixture::new(vec![comp([2.0, 0.0]), comp([-2.0, 0.0])]).unwrap();
        let ctx = MixtureLawContext::new(brownian(1.0), &std_gauss(2), target).unwrap();
        let xi = v(&[0.0, 0.7]);
        let t = 0.4;
        let w = ctx.responsibilities(t, &xi).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-14 && (w[1] - 0.5).abs() < 1e-14);
        let single = |m: [f64; 2]| {
            gaussian_posterior_mean(&ctx.kernel, &Vector::zeros(2), &Matrix::identity(2, 2), &v(&m), &(Matrix::identity(2, 2) * 0.3), t, &xi).unwrap()
        };
        let avg = (single([2.0, 0.0]) + single([-2.0, 0.0])) * 0.5;
        assert!((ctx.posterior_mean_y(t, &xi).unwrap() - avg).norm() < 1e-12);
    }

    #[test]
    fn single_component_matches_direct_formula() {
        for name in ["double_integrator", "oscillator", "nyquist_johnson"] {
            let kernel = Arc::new(build_kernel(builtin_system(name).unwrap(), 101, 1e-3).unwrap());
            let q0 = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
            let q1 = Matrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.3]);
            let m0 = v(&[0.5, -0.5]);
            let m1 = v(&[3.0, 1.0]);
            let p0 = GaussianMixture::gaussian(m0.clone(), PsdMatrix::new(q0.clone()).unwrap()).unwrap();
            let p1 = GaussianMixture::gaussian(m1.clone(), PsdMatrix::new(q1.clone()).unwrap()).unwrap();
            let ctx = MixtureLawContext::new(kernel.clone(), &p0, p1).unwrap();
            for &t in &[0.0, 0.3, 0.61, 0.95] {
                let xi = v(&[1.0 - t, 2.0 * t]);
                let a = ctx.posterior_mean_y(t, &xi).unwrap();
                let b = gaussian_posterior_mean(&kernel, &m0, &q0, &m1, &q1, t, &xi).unwrap();
                assert!((&a - &b).norm() <= 1e-10 * (1.0 + b.norm()), "{name} t={t}");
            }
        }
    }

    #[test]
    fn responsibilities_are_normalized() {
        let comps = vec![
            GaussianComponent::new(0.2, v(&[3.0, 0.0]), PsdMatrix::new(Matrix::identity(2, 2) * 0.1).unwrap()).unwrap(),
            GaussianComponent::new(0.3, v(&[-3.0, 1.0]), PsdMatrix::new(Matrix::identity(2, 2) * 0.5).unwrap()).unwrap(),
            GaussianComponent::new(0.5, v(&[0.0, -3.0]), PsdMatrix::new(Matrix::identity(2, 2) * 0.2).unwrap()).unwrap(),
        ];
        let kernel = Arc::new(build_kernel(builtin_system("oscillator").unwrap(), 101, 1e-3).unwrap());
        let ctx = MixtureLawContext::new(kernel, &std_gauss(2), GaussianMixture::new(comps).unwrap()).unwrap();
        for &t in &[0.0, 0.2, 0.5, 0.9, 0.999, 1.0] {
            for xi in [v(&[0.0, 0.0]), v(&[40.0, -25.0]), v(&[-3.0, 1.0])] {
                let w = ctx.responsibilities(t, &xi).unwrap();
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mixture_initial_law() {
        let comps = vec![
            GaussianComponent::new(0.5, v(&[1.0, 0.0]), PsdMatrix::identity(2)).unwrap(),
            GaussianComponent::new(0.5, v(&[-1.0, 0.0]), PsdMatrix::identity(2)).unwrap(),
        ];
        let gm = GaussianMixture::new(comps).unwrap();
        assert!(MixtureLawContext::new(brownian(1.0), &gm, std_gauss(2)).is_err());
        assert!(MixtureLawContext::new(brownian(1.0), &std_gauss(3), std_gauss(2)).is_err());
    }
}
