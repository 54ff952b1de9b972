//! Euler–Maruyama simulation of the closed loop
//! `X_{k+1} = X_k + (A X_k + B u(t_k, X_k)) Δt + ε B √Δt ξ_k`.
//!
//! Every path owns its own random stream, so results do not depend on the
//! number of worker threads.

use std::sync::Arc;

use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{FlatMatrix, Matrix, PsdMatrix, Vector};
use crate::mixture_law::{MixtureLawContext, MixtureScratch, MixtureSlice};
use crate::mlp::{ForwardCache, MlpParams};
use crate::rng;
use crate::samples::SampleSet;
use crate::systems::BridgeKernel;

/// A feedback law `(t, ξ) -> u`.
#[derive(Debug, Clone)]
pub enum FlowField {
    ClosedForm(Arc<MixtureLawContext>),
    Learned(Arc<MlpParams>),
    /// Bridge gain towards a fixed end point. With one row every path shares
    /// it, otherwise path `i` is steered to row `i`.
    PointBridge(SampleSet),
    Zero,
}

impl FlowField {
    pub fn id(&self) -> &'static str {
        match self {
            FlowField::ClosedForm(_) => "closed_form",
            FlowField::Learned(_) => "learned",
            FlowField::PointBridge(_) => "point_bridge",
            FlowField::Zero => "zero",
        }
    }

    fn check(&self, kernel: &BridgeKernel, paths: usize) -> Result<()> {
        let (n, m) = (kernel.n(), kernel.m());
        match self {
            FlowField::ClosedForm(ctx) => {
                if ctx.kernel().n() != n || ctx.kernel().m() != m {
                    return Err(Error::dim("closed-form law was built for another system"));
                }
            }
            FlowField::Learned(p) => {
                if p.state_dim() != n || p.control_dim() != m {
                    return Err(Error::dim(format!(
                        "network maps R^{} to R^{}, system has n = {n}, m = {m}",
                        p.state_dim(),
                        p.control_dim()
                    )));
                }
            }
            FlowField::PointBridge(targets) => {
                if targets.dim() != n {
                    return Err(Error::dim(format!(
                        "bridge targets have dimension {}, system has n = {n}",
                        targets.dim()
                    )));
                }
                if targets.len() != 1 && targets.len() != paths {
                    return Err(Error::dim(format!(
                        "{} bridge targets for {paths} paths",
                        targets.len()
                    )));
                }
            }
            FlowField::Zero => {}
        }
        Ok(())
    }

    /// Evaluates the law at a single point.
    pub fn eval(&self, kernel: &BridgeKernel, t: f64, xi: &[f64], path: usize) -> Result<Vec<f64>> {
        let slice = StepSlice::build(self, kernel, t)?;
        let mut scratch = Scratch::new(kernel);
        let mut out = vec![0.0; kernel.m()];
        slice.eval(self, xi, path, &mut scratch, &mut out)?;
        Ok(out)
    }
}

/// Law data precomputed for one step time.
enum StepSlice {
    Mixture(MixtureSlice),
    Time(f64),
    Bridge { gain: FlatMatrix, exp_rem: FlatMatrix },
    Zero,
}

struct Scratch {
    mixture: MixtureScratch,
    cache: ForwardCache,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(kernel: &BridgeKernel) -> Self {
        Scratch {
            mixture: MixtureScratch::default(),
            cache: ForwardCache::default(),
            tmp: vec![0.0; kernel.n()],
        }
    }
}

impl StepSlice {
    fn build(field: &FlowField, kernel: &BridgeKernel, t: f64) -> Result<Self> {
        let tc = kernel.clamp(t);
        Ok(match field {
            FlowField::ClosedForm(ctx) => StepSlice::Mixture(ctx.slice(tc)?),
            FlowField::Learned(_) => StepSlice::Time(tc),
            FlowField::PointBridge(_) => {
                let node = kernel.node(tc)?;
                let gain = kernel.gain(tc)?;
                StepSlice::Bridge {
                    gain: FlatMatrix::from(gain.as_ref()),
                    exp_rem: FlatMatrix::from(&node.exp_rem),
                }
            }
            FlowField::Zero => StepSlice::Zero,
        })
    }

    fn eval(&self, field: &FlowField, xi: &[f64], path: usize, s: &mut Scratch, out: &mut [f64]) -> Result<()> {
        match (self, field) {
            (StepSlice::Mixture(slice), _) => slice.feedback(xi, &mut s.mixture, out)?,
            (StepSlice::Time(t), FlowField::Learned(p)) => {
                out.copy_from_slice(p.forward_cached(*t, xi, &mut s.cache));
            }
            (StepSlice::Bridge { gain, exp_rem }, FlowField::PointBridge(targets)) => {
                let y = if targets.len() == 1 { targets.row(0) } else { targets.row(path) };
                exp_rem.apply(xi, &mut s.tmp);
                for (d, yi) in s.tmp.iter_mut().zip(y) {
                    *d = yi - *d;
                }
                gain.apply(&s.tmp, out);
            }
            (StepSlice::Zero, _) => out.iter_mut().for_each(|o| *o = 0.0),
            _ => unreachable!("step slice built for another law"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub dt: f64,
    pub seed: u64,
    /// Keep every `record_stride`-th step; the terminal step is always kept.
    pub record_stride: usize,
    /// Final simulated time; must be a whole number of steps.
    pub horizon: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            dt: 1e-3,
            seed: 0,
            record_stride: 1,
            horizon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub system: String,
    pub law: String,
    pub dt: f64,
    pub epsilon: f64,
}

/// Recorded states laid out as `[time][path][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub times: Vec<f64>,
    pub paths: usize,
    pub dim: usize,
    pub states: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl TrajectoryBatch {
    pub fn state(&self, k: usize, path: usize) -> &[f64] {
        let o = (k * self.paths + path) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn samples_at(&self, k: usize) -> SampleSet {
        let o = k * self.paths * self.dim;
        SampleSet::new(self.dim, self.states[o..o + self.paths * self.dim].to_vec())
            .expect("layout matches dimension")
    }

    pub fn terminal(&self) -> SampleSet {
        self.samples_at(self.times.len() - 1)
    }

    /// Index of the recorded time within `1e-9` of `t`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 1e-9)
            .ok_or_else(|| Error::invalid(format!("time {t} is not on the recorded grid")))
    }
}

/// Number of Euler steps, requiring `dt` to divide the unit interval.
pub fn step_count(dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::invalid(format!("dt must lie in (0, 1], got {dt}")));
    }
    let k = (1.0 / dt).round();
    if (k * dt - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("dt = {dt} does not divide [0, 1]")));
    }
    Ok(k as usize)
}

fn horizon_steps(total: usize, horizon: f64) -> Result<usize> {
    if !(horizon > 0.0 && horizon <= 1.0) {
        return Err(Error::invalid(format!("horizon must lie in (0, 1], got {horizon}")));
    }
    let k = (horizon * total as f64).round();
    if (k / total as f64 - horizon).abs() > 1e-9 || k < 1.0 {
        return Err(Error::invalid(format!("horizon {horizon} is not a whole number of steps")));
    }
    Ok(k as usize)
}

/// Simulates one path per row of `init`. With `dt` below the clamp `δ` the
/// final steps share one gain and overshoot the bridge end point.
pub fn rollout(kernel: &BridgeKernel, law: &FlowField, init: &SampleSet, opts: &RolloutOptions) -> Result<TrajectoryBatch> {
    let (n, m) = (kernel.n(), kernel.m());
    if init.is_empty() {
        return Err(Error::invalid("rollout needs at least one initial state"));
    }
    if init.dim() != n {
        return Err(Error::dim(format!(
            "initial states have dimension {}, system has n = {n}",
            init.dim()
        )));
    }
    if opts.record_stride == 0 {
        return Err(Error::invalid("record_stride must be positive"));
    }
    law.check(kernel, init.len())?;
    let total = step_count(opts.dt)?;
    let steps = horizon_steps(total, opts.horizon)?;
    let step_times: Vec<f64> = (0..steps).map(|k| k as f64 / total as f64).collect();
    let slices = step_times
        .par_iter()
        .map(|&t| StepSlice::build(law, kernel, t))
        .collect::<Result<Vec<_>>>()?;

    let recorded: Vec<usize> = (0..=steps)
        .filter(|k| k % opts.record_stride == 0 || *k == steps)
        .collect();
    let times: Vec<f64> = recorded.iter().map(|&k| k as f64 / total as f64).collect();

    let a = FlatMatrix::from(&kernel.system().a);
    let b = FlatMatrix::from(&kernel.system().b);
    let eps = kernel.epsilon();
    let dt = 1.0 / total as f64;
    let noise_scale = eps * dt.sqrt();
    let paths = init.len();

    let per_path = (0..paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let mut rng = rng::stream(opts.seed, rng::ROLLOUT_BASE + p as u64);
            let mut scratch = Scratch::new(kernel);
            let mut x = init.row(p).to_vec();
            let mut u = vec![0.0; m];
            let mut drive = vec![0.0; m];
            let mut ax = vec![0.0; n];
            let mut bu = vec![0.0; n];
            let mut out = Vec::with_capacity(recorded.len() * n);
            out.extend_from_slice(&x);
            for (k, slice) in slices.iter().enumerate() {
                slice.eval(law, &x, p, &mut scratch, &mut u)?;
                for (d, uk) in drive.iter_mut().zip(&u) {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *d = uk * dt + noise_scale * xi;
                }
                a.apply(&x, &mut ax);
                b.apply(&drive, &mut bu);
                for ((xi, axi), bui) in x.iter_mut().zip(&ax).zip(&bu) {
                    *xi += axi * dt + bui;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("state of path {p} at step {}", k + 1)));
                }
                if (k + 1) % opts.record_stride == 0 || k + 1 == steps {
                    out.extend_from_slice(&x);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut states = vec![0.0; recorded.len() * paths * n];
    for (p, path_states) in per_path.iter().enumerate() {
        for k in 0..recorded.len() {
            let o = (k * paths + p) * n;
            states[o..o + n].copy_from_slice(&path_states[k * n..(k + 1) * n]);
        }
    }
    Ok(TrajectoryBatch {
        times,
        paths,
        dim: n,
        states,
        meta: TrajectoryMeta {
            seed: opts.seed,
            system: kernel.system().name.clone(),
            law: law.id().to_string(),
            dt,
            epsilon: eps,
        },
    })
}

/// Sample mean and unbiased covariance of a point cloud.
pub fn sample_moments(samples: &SampleSet) -> Result<(Vector, PsdMatrix)> {
    let count = samples.len();
    if count < 2 {
        return Err(Error::invalid("moments need at least two samples"));
    }
    let d = samples.dim();
    let mean = samples.mean();
    let mut cov = Matrix::zeros(d, d);
    for row in samples.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (count - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, PsdMatrix::from_symmetric_part(&cov)))
}

/// Moments of the batch at the recorded time `t`.
pub fn moments(batch: &TrajectoryBatch, t: f64) -> Result<(Vector, PsdMatrix)> {
    let k = batch.time_index(t)?;
    sample_moments(&batch.samples_at(k))
}
