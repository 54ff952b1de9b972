//! Sample-based distances (MMD, W2) and 2-D kernel density estimates.

use std::cmp::Ordering;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::bridge::{reference_states, EndpointPair};
use crate::error::{Error, Result};
use crate::rng;
use crate::rollout::TrajectoryBatch;
use crate::samples::SampleSet;
use crate::systems::BridgeKernel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    /// `h` in `exp(-‖a-b‖² / (2h²))`.
    pub bandwidth: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { bandwidth: 2.0 }
    }
}

fn check_pair(x: &SampleSet, y: &SampleSet) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("sample sets must be non-empty"));
    }
    if x.dim() != y.dim() {
        return Err(Error::dim(format!(
            "sample dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Mean of `k(x_i, y_j)`; rows are summed in parallel and combined in order.
fn kernel_mean(x: &SampleSet, y: &SampleSet, inv: f64) -> f64 {
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            y.rows().map(|yj| (-sq_dist(xi, yj) * inv).exp()).sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (x.len() as f64 * y.len() as f64)
}

fn canonical_order(x: &SampleSet, y: &SampleSet) -> Ordering {
    x.len().cmp(&y.len()).then_with(|| {
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased V-statistic before clamping.
pub fn mmd2_unclamped(x: &SampleSet, y: &SampleSet, cfg: &MmdConfig) -> Result<f64> {
    check_pair(x, y)?;
    if !(cfg.bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {}", cfg.bandwidth)));
    }
    let (x, y) = match canonical_order(x, y) {
        Ordering::Greater => (y, x),
        _ => (x, y),
    };
    let inv = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
    let kxx = kernel_mean(x, x, inv);
    let kyy = kernel_mean(y, y, inv);
    let kxy = kernel_mean(x, y, inv);
    Ok(kxx + kyy - 2.0 * kxy)
}

pub fn mmd2(x: &SampleSet, y: &SampleSet, cfg: &MmdConfig) -> Result<f64> {
    Ok(mmd2_unclamped(x, y, cfg)?.max(0.0))
}

pub fn mmd(x: &SampleSet, y: &SampleSet, cfg: &MmdConfig) -> Result<f64> {
    Ok(mmd2(x, y, cfg)?.sqrt())
}

/// Exact W2 between two equal-size point clouds with uniform weights.
pub fn w2_exact(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "exact W2 needs equal sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = sq_dist(xi, y.row(j));
        }
    });
    let (_, total) = assignment::solve(&cost, n)?;
    Ok((total.max(0.0) / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct W2Config {
    pub subsample: usize,
    pub repeats: usize,
    /// Solve one assignment on all points (the larger set is still subsampled
    /// down to the smaller size).
    pub exact: bool,
}

impl Default for W2Config {
    fn default() -> Self {
        W2Config {
            subsample: 512,
            repeats: 4,
            exact: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Estimate {
    pub value: f64,
    /// Standard error across repeats; zero for a single exact solve.
    pub std_err: f64,
}

fn subsample<R: rand::Rng + ?Sized>(s: &SampleSet, k: usize, rng: &mut R) -> SampleSet {
    if k == s.len() {
        return s.clone();
    }
    let mut idx = index::sample(rng, s.len(), k).into_vec();
    idx.sort_unstable();
    s.select(&idx)
}

pub fn w2<R: rand::Rng + ?Sized>(x: &SampleSet, y: &SampleSet, cfg: &W2Config, rng: &mut R) -> Result<W2Estimate> {
    check_pair(x, y)?;
    let smaller = x.len().min(y.len());
    let k = if cfg.exact { smaller } else { cfg.subsample.min(smaller) };
    if k == 0 || cfg.repeats == 0 {
        return Err(Error::invalid("W2 subsample size and repeats must be positive"));
    }
    let single = cfg.exact || (x.len() == k && y.len() == k);
    if single {
        let xs = subsample(x, k, rng);
        let ys = subsample(y, k, rng);
        return Ok(W2Estimate {
            value: w2_exact(&xs, &ys)?,
            std_err: 0.0,
        });
    }
    let mut values = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let xs = subsample(x, k, rng);
        let ys = subsample(y, k, rng);
        values.push(w2_exact(&xs, &ys)?);
    }
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let std_err = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    } else {
        0.0
    };
    Ok(W2Estimate { value: mean, std_err })
}

/// Rectangular evaluation grid, `nx × ny` nodes including the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl Grid2 {
    /// Grid spanning `pad` sample standard deviations around the sample mean
    /// (plus the bandwidth) on each axis.
    pub fn covering(points: &SampleSet, pad: f64, bandwidth: f64, nodes: usize) -> Result<Self> {
        if points.dim() != 2 || points.is_empty() {
            return Err(Error::dim("grid covering needs non-empty 2-D points"));
        }
        let mean = points.mean();
        let mut sd = [0.0; 2];
        for r in points.rows() {
            for k in 0..2 {
                sd[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let count = points.len() as f64;
        let half: Vec<f64> = sd
            .iter()
            .map(|s| pad * ((s / count).sqrt() + bandwidth))
            .collect();
        Ok(Grid2 {
            x_min: mean[0] - half[0],
            x_max: mean[0] + half[0],
            nx: nodes,
            y_min: mean[1] - half[1],
            y_max: mean[1] + half[1],
            ny: nodes,
        })
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::invalid("grid needs at least 2 nodes per axis and increasing bounds"));
        }
        Ok(())
    }

    /// Trapezoidal integral of a field laid out `[iy][ix]`.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        let dx = (self.x_max - self.x_min) / (self.nx - 1) as f64;
        let dy = (self.y_max - self.y_min) / (self.ny - 1) as f64;
        let mut total = 0.0;
        for j in 0..self.ny {
            let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
            for i in 0..self.nx {
                let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
                total += wx * wy * field[j * self.nx + i];
            }
        }
        total * dx * dy
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Scott's rule for an isotropic 2-D kernel: `σ̄ n^{-1/6}`.
pub fn scott_bandwidth(points: &SampleSet) -> f64 {
    let count = points.len() as f64;
    let mean = points.mean();
    let d = points.dim();
    let mut var = 0.0;
    for r in points.rows() {
        var += r.iter().zip(mean.iter()).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
    }
    let sd = (var / (count - 1.0).max(1.0) / d as f64).sqrt();
    sd * count.powf(-1.0 / (d as f64 + 4.0))
}

/// Isotropic Gaussian KDE on `grid`, laid out `[iy][ix]`.
pub fn kde2(points: &SampleSet, grid: &Grid2, bandwidth: f64) -> Result<Vec<f64>> {
    if points.dim() != 2 || points.is_empty() {
        return Err(Error::dim("kde2 needs non-empty 2-D points"));
    }
    grid.validate()?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Degenerate(format!("KDE bandwidth must be positive, got {bandwidth}")));
    }
    let xs = grid.xs();
    let ys = grid.ys();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * bandwidth * bandwidth * points.len() as f64);
    let mut field = vec![0.0; grid.nx * grid.ny];
    field.par_chunks_mut(grid.nx).enumerate().for_each(|(j, row)| {
        let y = ys[j];
        for (i, out) in row.iter_mut().enumerate() {
            let x = xs[i];
            let s: f64 = points
                .rows()
                .map(|p| (-((p[0] - x).powi(2) + (p[1] - y).powi(2)) * inv).exp())
                .sum();
            *out = s * norm;
        }
    });
    Ok(field)
}

/// Up to `max` recorded time indices, evenly spread and always including
/// both ends.
pub fn eval_indices(len: usize, max: usize) -> Vec<usize> {
    if len == 0 || max == 0 {
        return Vec::new();
    }
    if len <= max {
        return (0..len).collect();
    }
    if max == 1 {
        return vec![len - 1];
    }
    let mut idx: Vec<usize> = (0..max)
        .map(|k| ((k as f64) * (len - 1) as f64 / (max - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mmd: MmdConfig,
    pub w2: W2Config,
    pub max_times: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mmd: MmdConfig::default(),
            w2: W2Config::default(),
            max_times: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub times: Vec<f64>,
    pub mmd: Vec<f64>,
    pub mmd_normalized: Vec<f64>,
    pub w2: Vec<f64>,
    pub w2_std_err: Vec<f64>,
    /// `MMD(P0 samples, P1 samples)`.
    pub normalizer: f64,
    /// `W2(P0 samples, P1 samples)`.
    pub w2_reference: f64,
}

/// Compares the generated batch against bridge samples regenerated from the
/// frozen pairs at each evaluation time.
pub fn evaluate(
    kernel: &BridgeKernel,
    batch: &TrajectoryBatch,
    pairs: &[EndpointPair],
    opts: &EvalOptions,
    seed: u64,
) -> Result<MetricCurve> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation needs reference pairs"));
    }
    if batch.dim != kernel.n() {
        return Err(Error::dim("trajectory dimension differs from the system"));
    }
    let x0 = SampleSet::from_vectors(&pairs.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
    let x1 = SampleSet::from_vectors(&pairs.iter().map(|p| p.y.clone()).collect::<Vec<_>>())?;
    let normalizer = mmd(&x0, &x1, &opts.mmd)?;
    if !(normalizer > 0.0) {
        return Err(Error::Degenerate("P0 and P1 samples coincide; MMD normalizer is zero".into()));
    }
    let w2_reference = w2(&x0, &x1, &opts.w2, &mut rng::stream(seed, rng::EVAL))?.value;

    let indices = eval_indices(batch.times.len(), opts.max_times);
    let rows = indices
        .par_iter()
        .map(|&k| -> Result<(f64, f64, W2Estimate)> {
            let t = batch.times[k];
            let mut r = rng::stream(seed, rng::EVAL_BASE + k as u64);
            let reference = reference_states(kernel, pairs, t, &mut r)?;
            let generated = batch.samples_at(k);
            let d = mmd(&generated, &reference, &opts.mmd)?;
            let w = w2(&generated, &reference, &opts.w2, &mut r)?;
            Ok((t, d, w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricCurve {
        times: rows.iter().map(|r| r.0).collect(),
        mmd: rows.iter().map(|r| r.1).collect(),
        mmd_normalized: rows.iter().map(|r| r.1 / normalizer).collect(),
        w2: rows.iter().map(|r| r.2.value).collect(),
        w2_std_err: rows.iter().map(|r| r.2.std_err).collect(),
        normalizer,
        w2_reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> SampleSet {
        SampleSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn two_point_closed_form() {
        let x = set(&[&[0.0, 0.0]]);
        let y = set(&[&[3.0, 4.0]]);
        let got = mmd2(&x, &y, &MmdConfig::default()).unwrap();
        let want = 2.0 * (1.0 - (-25.0f64 / 8.0).exp());
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn identical_sets_zero() {
        let x = set(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert!(mmd2(&x, &x, &MmdConfig::default()).unwrap().abs() < 1e-15);
        assert_eq!(w2_exact(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn shift_gives_norm() {
        let x = set(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5], &[-3.0, 2.0]]);
        let shifted: Vec<Vec<f64>> = x.rows().map(|r| vec![r[0] + 0.3, r[1] - 0.4]).collect();
        let y = SampleSet::from_rows(&shifted).unwrap();
        assert!((w2_exact(&x, &y).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn w2_size_mismatch() {
        let x = set(&[&[0.0], &[1.0]]);
        let y = set(&[&[0.0]]);
        assert!(w2_exact(&x, &y).is_err());
        let mut r = rng::stream(0, 0);
        let e = w2(&x, &y, &W2Config::default(), &mut r).unwrap();
        assert!(e.value >= 0.0);
    }

    #[test]
    fn kde_single_point_bump() {
        let p = set(&[&[1.0, -1.0]]);
        let grid = Grid2 { x_min: -4.0, x_max: 6.0, nx: 101, y_min: -6.0, y_max: 4.0, ny: 101 };
        let f = kde2(&p, &grid, 0.5).unwrap();
        let (imax, _) = f
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        assert_eq!((imax % 101, imax / 101), (50, 50));
        assert!((f[imax] - 1.0 / (2.0 * std::f64::consts::PI * 0.25)).abs() < 1e-12);
        assert!((grid.integrate(&f) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kde_rejects_zero_bandwidth() {
        let p = set(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let grid = Grid2 { x_min: 0.0, x_max: 2.0, nx: 3, y_min: 0.0, y_max: 2.0, ny: 3 };
        assert!(kde2(&p, &grid, 0.0).is_err());
        assert_eq!(scott_bandwidth(&p), 0.0);
    }

    #[test]
    fn eval_index_selection() {
        assert_eq!(eval_indices(5, 50), vec![0, 1, 2, 3, 4]);
        let idx = eval_indices(1001, 50);
        assert_eq!(idx.len(), 50);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 1000);
    }
}
