//! Point-to-point bridges: the minimum-energy interpolant, its stochastic
//! counterpart, the shared feedback gain and training-pair generation.

use nalgebra::Cholesky;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, symmetrize, van_loan, PsdMatrix, Vector};
use crate::samples::SampleSet;
use crate::systems::BridgeKernel;

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPair {
    pub x: Vector,
    pub y: Vector,
}

impl EndpointPair {
    pub fn new(x: Vector, y: Vector) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::dim(format!(
                "endpoint dimensions differ: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("endpoint pair".into()));
        }
        Ok(EndpointPair { x, y })
    }
}

/// One regression sample: bridge state at `t` and the bridge control there.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub t: f64,
    pub state: Vector,
    pub control: Vector,
    pub pair: EndpointPair,
}

fn check_dim(kernel: &BridgeKernel, v: &Vector, what: &str) -> Result<()> {
    if v.len() != kernel.n() {
        return Err(Error::dim(format!(
            "{what} has dimension {}, system has n = {}",
            v.len(),
            kernel.n()
        )));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Feedback that drives `xi` at time `t` to `y` at time 1:
/// `B' e^{(1-t)A'} Φ_{1-t}^{-1} (y - e^{(1-t)A} xi)`, evaluated at the clamped time.
/// The same gain serves the deterministic and the stochastic bridge.
pub fn bridge_gain(kernel: &BridgeKernel, t: f64, xi: &Vector, y: &Vector) -> Result<Vector> {
    check_dim(kernel, xi, "state")?;
    check_dim(kernel, y, "target")?;
    let tc = kernel.clamp(t);
    let node = kernel.node(tc)?;
    let gain = kernel.gain(tc)?;
    Ok(gain.as_ref() * (y - &node.exp_rem * xi))
}

/// Minimum-energy deterministic interpolant `R_t x + S_t y`.
pub fn det_interpolate(kernel: &BridgeKernel, pair: &EndpointPair, t: f64) -> Result<Vector> {
    check_time(t)?;
    check_dim(kernel, &pair.x, "x")?;
    check_dim(kernel, &pair.y, "y")?;
    if t == 0.0 {
        return Ok(pair.x.clone());
    }
    if t == 1.0 {
        return Ok(pair.y.clone());
    }
    let node = kernel.node(t)?;
    Ok(&node.r * &pair.x + &node.s * &pair.y)
}

/// Gaussian law of the stochastic bridge at `t`: mean equals the
/// deterministic interpolant, covariance `ε² Σ_t`.
pub fn bridge_marginal(
    kernel: &BridgeKernel,
    pair: &EndpointPair,
    t: f64,
) -> Result<(Vector, PsdMatrix)> {
    let mean = det_interpolate(kernel, pair, t)?;
    let node = kernel.node(t)?;
    let eps2 = kernel.epsilon() * kernel.epsilon();
    let cov = PsdMatrix::from_symmetric_part(&(node.sigma.as_matrix() * eps2));
    Ok((mean, cov))
}

/// Draws `X^z_t` from the bridge marginal.
pub fn sample_bridge_state<R: rand::Rng + ?Sized>(
    kernel: &BridgeKernel,
    pair: &EndpointPair,
    t: f64,
    rng: &mut R,
) -> Result<Vector> {
    let mut state = det_interpolate(kernel, pair, t)?;
    let eps = kernel.epsilon();
    if eps > 0.0 && t > 0.0 && t < 1.0 {
        let node = kernel.node(t)?;
        let z = Vector::from_fn(kernel.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
        state += (&node.sigma_sqrt * z) * eps;
    }
    Ok(state)
}

/// Bridge state at `t` paired with the bridge control at that state.
///
/// Computes only the matrices this needs, straight from two block
/// exponentials, and draws the noise through a Cholesky root of `Σ_t`.
pub fn sample_training_pair<R: rand::Rng + ?Sized>(
    kernel: &BridgeKernel,
    pair: &EndpointPair,
    t: f64,
    rng: &mut R,
) -> Result<BridgeSample> {
    check_time(t)?;
    if t > 1.0 - kernel.delta() + 1e-12 {
        return Err(Error::invalid(format!(
            "training time {t} beyond the clamp 1 - {}",
            kernel.delta()
        )));
    }
    check_dim(kernel, &pair.x, "x")?;
    check_dim(kernel, &pair.y, "y")?;
    let (a, b) = (&kernel.system().a, &kernel.system().b);
    let (exp_t, phi_t) = van_loan(a, b, t)?;
    let (exp_rem, phi_rem) = van_loan(a, b, 1.0 - t)?;
    let rem_phi = &exp_rem * phi_t.as_matrix();
    let s = kernel.phi_one_factor().solve(&rem_phi).transpose();
    let mut state = &exp_t * &pair.x + &s * (&pair.y - kernel.exp_one() * &pair.x);
    let eps = kernel.epsilon();
    if eps > 0.0 && t > 0.0 {
        let sigma = symmetrize(&(phi_t.as_matrix() - &s * &rem_phi));
        let root = match Cholesky::new(sigma.clone()) {
            Some(c) => c.unpack(),
            None => psd_sqrt(&PsdMatrix::from_symmetric_part(&sigma))?,
        };
        let z = Vector::from_fn(kernel.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
        state += (root * z) * eps;
    }
    let factor = Cholesky::new(phi_rem.into_matrix())
        .ok_or_else(|| Error::Degenerate(format!("Gramian Φ_(1-t) not positive definite at t = {t}")))?;
    let w = factor.solve(&(&pair.y - &exp_rem * &state));
    let control = (&exp_rem * b).tr_mul(&w);
    Ok(BridgeSample {
        t,
        state,
        control,
        pair: pair.clone(),
    })
}

/// One fresh bridge state per pair at time `t`.
pub fn reference_states<R: rand::Rng + ?Sized>(
    kernel: &BridgeKernel,
    pairs: &[EndpointPair],
    t: f64,
    rng: &mut R,
) -> Result<SampleSet> {
    let mut out = SampleSet::with_capacity(kernel.n(), pairs.len());
    for pair in pairs {
        let s = sample_bridge_state(kernel, pair, t, rng)?;
        out.push(s.as_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rng;
    use crate::systems::{build_kernel, builtin_system, LinearSystem};

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn brownian(eps: f64) -> BridgeKernel {
        let sys = LinearSystem::new("bm", Matrix::zeros(2, 2), Matrix::identity(2, 2), eps).unwrap();
        build_kernel(sys, 101, 1e-3).unwrap()
    }

    #[test]
    fn brownian_gain_is_remaining_distance_over_remaining_time() {
        let k = brownian(1.0);
        let xi = v(&[0.3, -1.0]);
        let y = v(&[2.0, 1.0]);
        for &t in &[0.0, 0.25, 0.5, 0.9, 0.123] {
            let g = bridge_gain(&k, t, &xi, &y).unwrap();
            let want = (&y - &xi) / (1.0 - t);
            assert!((g - want).norm() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn double_integrator_gain_hand_value() {
        let k = build_kernel(builtin_system("double_integrator").unwrap(), 11, 1e-3).unwrap();
        let g = bridge_gain(&k, 0.0, &v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gain_at_zero_matches_open_loop_control() {
        let k = build_kernel(builtin_system("oscillator").unwrap(), 11, 1e-3).unwrap();
        let x = v(&[0.4, -0.2]);
        let y = v(&[-1.0, 2.0]);
        let sys = k.system();
        let open = sys.b.transpose()
            * k.exp_one().transpose()
            * k.phi_one().as_matrix().clone().try_inverse().unwrap()
            * (&y - k.exp_one() * &x);
        let g = bridge_gain(&k, 0.0, &x, &y).unwrap();
        assert!((g - open).norm() < 1e-10);
    }

    #[test]
    fn training_pair_matches_node_formulas() {
        let pair = EndpointPair::new(v(&[1.0, -0.5]), v(&[-2.0, 1.5])).unwrap();
        for name in ["double_integrator", "oscillator", "nyquist_johnson"] {
            let det = BridgeKernel::new(builtin_system(name).unwrap().with_epsilon(0.0).unwrap(), 11, 1e-3).unwrap();
            let noisy = BridgeKernel::new(builtin_system(name).unwrap(), 11, 1e-3).unwrap();
            let mut r = rng::stream(4, 0);
            for &t in &[0.0, 0.137, 0.5, 0.93, 0.999] {
                let s = sample_training_pair(&det, &pair, t, &mut r).unwrap();
                let want = det_interpolate(&det, &pair, t).unwrap();
                assert!((&s.state - &want).norm() < 1e-10 * (1.0 + want.norm()), "{name} t={t}");
                let g = bridge_gain(&det, t, &s.state, &pair.y).unwrap();
                assert!((&s.control - &g).norm() < 1e-8 * (1.0 + g.norm()), "{name} t={t}");
                let s = sample_training_pair(&noisy, &pair, t, &mut r).unwrap();
                let g = bridge_gain(&noisy, t, &s.state, &pair.y).unwrap();
                assert!((&s.control - &g).norm() < 1e-8 * (1.0 + g.norm()), "{name} t={t}");
            }
        }
    }

    #[test]
    fn interpolant_endpoints_and_linear_case() {
        let k = brownian(0.0);
        let pair = EndpointPair::new(v(&[1.0, 2.0]), v(&[-3.0, 0.5])).unwrap();
        assert_eq!(det_interpolate(&k, &pair, 0.0).unwrap(), pair.x);
        assert_eq!(det_interpolate(&k, &pair, 1.0).unwrap(), pair.y);
        for &t in &[0.1, 0.37, 0.5, 0.8] {
            let got = det_interpolate(&k, &pair, t).unwrap();
            let want = &pair.x * (1.0 - t) + &pair.y * t;
            assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn marginal_covariance_cases() {
        let k = brownian(1.0);
        let pair = EndpointPair::new(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        for &t in &[0.0, 1.0] {
            let (_, cov) = bridge_marginal(&k, &pair, t).unwrap();
            assert!(cov.norm() < 1e-12);
        }
        let (_, cov) = bridge_marginal(&k, &pair, 0.3).unwrap();
        assert!((cov.as_matrix() - Matrix::identity(2, 2) * 0.21).norm() < 1e-12);

        let det = brownian(0.0);
        let (_, cov) = bridge_marginal(&det, &pair, 0.3).unwrap();
        assert_eq!(cov.norm(), 0.0);
    }

    #[test]
    fn zero_noise_training_pair_is_deterministic() {
        let k = build_kernel(
            builtin_system("nyquist_johnson").unwrap().with_epsilon(0.0).unwrap(),
            101,
            1e-3,
        )
        .unwrap();
        let pair = EndpointPair::new(v(&[1.0, 0.0]), v(&[0.0, 2.0])).unwrap();
        let mut r = rng::stream(1, 0);
        let s = sample_training_pair(&k, &pair, 0.4, &mut r).unwrap();
        let again = sample_training_pair(&k, &pair, 0.4, &mut rng::stream(2, 0)).unwrap();
        assert_eq!(s.state, again.state);
        assert_eq!(s.control, again.control);
        let want = det_interpolate(&k, &pair, 0.4).unwrap();
        assert!((&s.state - &want).norm() <= 1e-12 * (1.0 + want.norm()));
        assert!(sample_training_pair(&k, &pair, 0.9995, &mut r).is_err());
    }

    #[test]
    fn stochastic_gain_equals_deterministic_gain() {
        let noisy = build_kernel(builtin_system("oscillator").unwrap(), 101, 1e-3).unwrap();
        let quiet = build_kernel(
            builtin_system("oscillator").unwrap().with_epsilon(0.0).unwrap(),
            101,
            1e-3,
        )
        .unwrap();
        let xi = v(&[0.7, -0.1]);
        let y = v(&[1.5, 0.2]);
        for &t in &[0.0, 0.33, 0.71, 0.999, 1.0] {
            let a = bridge_gain(&noisy, t, &xi, &y).unwrap();
            let b = bridge_gain(&quiet, t, &xi, &y).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dimension_errors() {
        let k = brownian(1.0);
        assert!(bridge_gain(&k, 0.5, &v(&[1.0]), &v(&[1.0, 2.0])).is_err());
        assert!(EndpointPair::new(v(&[1.0]), v(&[1.0, 2.0])).is_err());
        let pair = EndpointPair::new(v(&[1.0, 0.0]), v(&[1.0, 2.0])).unwrap();
        assert!(det_interpolate(&k, &pair, 1.5).is_err());
    }
}
