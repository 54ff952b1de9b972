//! Linear control systems `dX = A X dt + B (u dt + ε dW)`, the benchmark
//! catalog, controllability checks and the precomputed [`BridgeKernel`].

use std::borrow::Cow;
use std::fmt;

use nalgebra::{Cholesky, Dyn, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gramian, mat_exp, psd_sqrt, van_loan, Matrix, PsdMatrix};

/// Default number of kernel grid nodes (matches `dt = 1e-3`).
pub const DEFAULT_GRID_SIZE: usize = 1001;
/// Default interior clamp keeping feedback evaluation away from `t = 1`.
pub const DEFAULT_DELTA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub name: String,
    pub a: Matrix,
    pub b: Matrix,
    /// Noise intensity; zero selects the deterministic system.
    pub epsilon: f64,
}

impl LinearSystem {
    pub fn new(name: impl Into<String>, a: Matrix, b: Matrix, epsilon: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dim(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim(format!(
                "B must be {n}×m with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        linalg::check_finite(&a, "A")?;
        linalg::check_finite(&b, "B")?;
        Ok(LinearSystem {
            name: name.into(),
            a,
            b,
            epsilon,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input (and noise) dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub n: usize,
    pub singular_values: Vec<f64>,
    pub controllable: bool,
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rank {} of {} (singular values {:?})",
            self.rank, self.n, self.singular_values
        )
    }
}

/// Kalman rank test on `[B, AB, …, A^{n-1}B]`.
pub fn is_controllable(a: &Matrix, b: &Matrix) -> Result<RankReport> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || b.ncols() == 0 {
        return Err(Error::dim(format!(
            "controllability needs A n×n and B n×m, got A {}x{} and B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let m = b.ncols();
    let mut kalman = Matrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        kalman.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let svd = SVD::new(kalman, false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let largest = sv.first().copied().unwrap_or(0.0);
    let rank = if largest > 0.0 {
        sv.iter().filter(|&&s| s > 1e-10 * largest).count()
    } else {
        0
    };
    Ok(RankReport {
        rank,
        n,
        singular_values: sv,
        controllable: rank == n,
    })
}

/// Looks up a benchmark system. Accepts `double_integrator`, `oscillator`,
/// `nyquist_johnson` and `mass_spring(d)` for even `d >= 2`. Noise intensity
/// defaults to 1.
pub fn builtin_system(name: &str) -> Result<LinearSystem> {
    let b2 = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let two = |vals: [f64; 4]| Matrix::from_row_slice(2, 2, &vals);
    match name.trim() {
        "double_integrator" => LinearSystem::new(name, two([0.0, 1.0, 0.0, 0.0]), b2, 1.0),
        "oscillator" => LinearSystem::new(name, two([0.0, 5.0, -5.0, 0.0]), b2, 1.0),
        "nyquist_johnson" => LinearSystem::new(name, two([0.0, 1.0, -1.0, -1.0]), b2, 1.0),
        other => {
            let d = other
                .strip_prefix("mass_spring(")
                .and_then(|s| s.strip_suffix(')'))
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::UnknownSystem(other.to_string()))?;
            mass_spring(d)
        }
    }
}

/// Chain of `d/2` unit masses joined by unit springs, the first one tied to a
/// wall. State is `[positions; velocities]`; every mass carries its own force
/// input, so `B = [0; I]` and `m = d/2`.
pub fn mass_spring(d: usize) -> Result<LinearSystem> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "mass_spring dimension must be even and >= 2, got {d}"
        )));
    }
    let k = d / 2;
    let mut stiffness = Matrix::zeros(k, k);
    for i in 0..k {
        stiffness[(i, i)] = if i + 1 == k { 1.0 } else { 2.0 };
        if i + 1 < k {
            stiffness[(i, i + 1)] = -1.0;
            stiffness[(i + 1, i)] = -1.0;
        }
    }
    let mut a = Matrix::zeros(d, d);
    a.view_mut((0, k), (k, k)).fill_with_identity();
    a.view_mut((k, 0), (k, k)).copy_from(&(-stiffness));
    let mut b = Matrix::zeros(d, k);
    b.view_mut((k, 0), (k, k)).fill_with_identity();
    let sys = LinearSystem::new(format!("mass_spring({d})"), a, b, 1.0)?;
    let report = is_controllable(&sys.a, &sys.b)?;
    if !report.controllable {
        return Err(Error::Uncontrollable(report));
    }
    Ok(sys)
}

/// Bridge quantities at one time `t`.
#[derive(Debug, Clone)]
pub struct KernelNode {
    pub t: f64,
    /// `e^{tA}`
    pub exp_t: Matrix,
    /// `e^{(1-t)A}`
    pub exp_rem: Matrix,
    /// `Φ_t`
    pub phi_t: PsdMatrix,
    /// `Φ_{1-t}`
    pub phi_rem: PsdMatrix,
    /// Bridge covariance per unit noise, `Φ_t - Φ_t e^{(1-t)A'} Φ_1^{-1} e^{(1-t)A} Φ_t`.
    pub sigma: PsdMatrix,
    pub sigma_sqrt: Matrix,
    /// Weight of the start point in the bridge mean.
    pub r: Matrix,
    /// Weight of the end point in the bridge mean.
    pub s: Matrix,
    /// Feedback gain `B' e^{(1-t)A'} Φ_{1-t}^{-1}`; absent past the clamp.
    pub gain: Option<Matrix>,
}

/// Time-grid cache of every matrix the bridge and feedback formulas need.
#[derive(Debug, Clone)]
pub struct BridgeKernel {
    system: LinearSystem,
    delta: f64,
    exp_one: Matrix,
    phi_one: PsdMatrix,
    phi_one_factor: Cholesky<f64, Dyn>,
    nodes: Vec<KernelNode>,
}

/// Builds the kernel on the uniform grid `t_k = k / (grid_size - 1)`.
pub fn build_kernel(system: LinearSystem, grid_size: usize, delta: f64) -> Result<BridgeKernel> {
    BridgeKernel::new(system, grid_size, delta)
}

impl BridgeKernel {
    pub fn new(system: LinearSystem, grid_size: usize, delta: f64) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::invalid(format!("grid_size must be >= 2, got {grid_size}")));
        }
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::invalid(format!("delta must lie in (0, 0.5), got {delta}")));
        }
        let report = is_controllable(&system.a, &system.b)?;
        if !report.controllable {
            return Err(Error::Uncontrollable(report));
        }
        let exp_one = mat_exp(&system.a, 1.0)?;
        let phi_one = gramian(&system.a, &system.b, 1.0)?;
        let phi_one_factor = linalg::spd_factor(&phi_one)?;
        let mut kernel = BridgeKernel {
            system,
            delta,
            exp_one,
            phi_one,
            phi_one_factor,
            nodes: Vec::new(),
        };
        let last = (grid_size - 1) as f64;
        let nodes = (0..grid_size)
            .into_par_iter()
            .map(|k| kernel.compute_node(k as f64 / last))
            .collect::<Result<Vec<_>>>()?;
        kernel.nodes = nodes;
        Ok(kernel)
    }

    pub fn system(&self) -> &LinearSystem {
        &self.system
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.system.epsilon
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    /// `e^{A}`
    pub fn exp_one(&self) -> &Matrix {
        &self.exp_one
    }

    /// `Φ_1`
    pub fn phi_one(&self) -> &PsdMatrix {
        &self.phi_one
    }

    /// Cholesky factor of `Φ_1`.
    pub fn phi_one_factor(&self) -> &Cholesky<f64, Dyn> {
        &self.phi_one_factor
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|n| n.t)
    }

    pub fn nodes(&self) -> &[KernelNode] {
        &self.nodes
    }

    /// Clamps a law-evaluation time into `[0, 1 - δ]`.
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(0.0, 1.0 - self.delta)
    }

    fn grid_index(&self, t: f64) -> Option<usize> {
        let last = self.nodes.len().checked_sub(1)?;
        let k = (t * last as f64).round();
        if k < 0.0 || k > last as f64 {
            return None;
        }
        let k = k as usize;
        ((self.nodes[k].t - t).abs() <= 1e-12).then_some(k)
    }

    /// Cached node when `t` sits on the grid, otherwise a fresh computation.
    pub fn node(&self, t: f64) -> Result<Cow<'_, KernelNode>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        match self.grid_index(t) {
            Some(k) => Ok(Cow::Borrowed(&self.nodes[k])),
            None => Ok(Cow::Owned(self.compute_node(t)?)),
        }
    }

    /// Feedback gain at the clamped time.
    pub fn gain(&self, t: f64) -> Result<Cow<'_, Matrix>> {
        let tc = self.clamp(t);
        match self.node(tc)? {
            Cow::Borrowed(node) => match &node.gain {
                Some(g) => Ok(Cow::Borrowed(g)),
                None => Ok(Cow::Owned(self.gain_at(tc)?)),
            },
            Cow::Owned(node) => match node.gain {
                Some(g) => Ok(Cow::Owned(g)),
                None => Ok(Cow::Owned(self.gain_at(tc)?)),
            },
        }
    }

    fn gain_at(&self, t: f64) -> Result<Matrix> {
        let rem = 1.0 - t;
        let (exp_rem, phi_rem) = van_loan(&self.system.a, &self.system.b, rem)?;
        Ok(linalg::solve_spd(&phi_rem, &(exp_rem * &self.system.b))?.transpose())
    }

    fn compute_node(&self, t: f64) -> Result<KernelNode> {
        let (a, b) = (&self.system.a, &self.system.b);
        let n = a.nrows();
        let rem = 1.0 - t;
        let (exp_t, phi_t) = van_loan(a, b, t)?;
        let (exp_rem, phi_rem) = van_loan(a, b, rem)?;

        let (r, s, sigma) = if t >= 1.0 {
            // Pinned endpoint: the bridge sits exactly at y.
            (
                Matrix::zeros(n, n),
                Matrix::identity(n, n),
                PsdMatrix::zeros(n),
            )
        } else {
            // S_t = Φ_t e^{(1-t)A'} Φ_1^{-1} = (Φ_1^{-1} e^{(1-t)A} Φ_t)'
            let s = linalg::solve_spd(&self.phi_one, &(&exp_rem * phi_t.as_matrix()))?.transpose();
            let r = &exp_t - &s * &self.exp_one;
            let sigma = phi_t.as_matrix() - &s * &exp_rem * phi_t.as_matrix();
            (r, s, PsdMatrix::from_symmetric_part(&sigma))
        };
        let sigma_sqrt = psd_sqrt(&sigma)?;
        let gain = if t <= 1.0 - self.delta + 1e-12 {
            Some(linalg::solve_spd(&phi_rem, &(&exp_rem * b))?.transpose())
        } else {
            None
        };
        Ok(KernelNode {
            t,
            exp_t,
            exp_rem,
            phi_t,
            phi_rem,
            sigma,
            sigma_sqrt,
            r,
            s,
            gain,
        })
    }
}
