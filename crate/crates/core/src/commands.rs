//! The five pipeline stages behind the command-line tool.
//!
//! Each stage validates its inputs before touching the output directory and
//! updates `manifest.json` only after all of its files are written.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::config::{LawConfig, RunConfig};
use crate::distributions::{log_density, Distribution};
use crate::error::{Error, Result};
use crate::io::{self, CsvOut, ManifestEntry};
use crate::linalg::{self, Vector};
use crate::metrics::{self, Grid2, MetricCurve};
use crate::mixture_law::MixtureLawContext;
use crate::rng;
use crate::rollout::{self, FlowField, RolloutOptions, TrajectoryMeta};
use crate::samples::SampleSet;
use crate::systems::{is_controllable, BridgeKernel, LinearSystem, RankReport};
use crate::trainer::{self, TrainingSet};

pub const BRIDGES_CSV: &str = "bridges.csv";
pub const PARAMS_JSON: &str = "params.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const TRAINING_PAIRS_CSV: &str = "training_pairs.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const TERMINAL_CSV: &str = "terminal.csv";
pub const TARGET_CSV: &str = "target_samples.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_SUMMARY_JSON: &str = "metrics_summary.json";
pub const DENSITY_CSV: &str = "density.csv";

/// A loaded config with its output directory and identity.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub config_hash: String,
}

impl RunContext {
    /// `out` and `seed` override the config values.
    pub fn load(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let config = RunConfig::load(config_path)?;
        let config_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::new(config, config_dir, out, seed)
    }

    pub fn new(mut config: RunConfig, config_dir: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        let out_dir = match (out, &config.output_dir) {
            (Some(o), _) => o,
            (None, Some(o)) if o.is_absolute() => o.clone(),
            (None, Some(o)) => config_dir.join(o),
            (None, None) => PathBuf::from("out"),
        };
        Ok(RunContext {
            run_id: config.run_id(),
            config_hash: config.hash(),
            config,
            config_dir,
            out_dir,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn system(&self) -> Result<LinearSystem> {
        self.config.system.build()
    }

    pub fn kernel(&self) -> Result<BridgeKernel> {
        let k = self.config.kernel;
        BridgeKernel::new(self.system()?, k.grid_size, k.delta)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::io(format!("creating {}", self.out_dir.display()), e))
    }

    fn finish(&self, command: &str, files: &[(&str, &str)]) -> Result<Vec<PathBuf>> {
        let entries = files
            .iter()
            .map(|(path, role)| ManifestEntry {
                path: path.to_string(),
                role: role.to_string(),
                command: command.to_string(),
            })
            .collect();
        io::update_manifest(&self.out_dir, &self.run_id, &self.config_hash, self.seed(), entries)?;
        Ok(files.iter().map(|(p, _)| self.out_path(p)).collect())
    }

    /// Location of the trained parameters for a learned law.
    pub fn params_path(&self) -> PathBuf {
        match &self.config.law {
            LawConfig::Learned { params_file: Some(p) } if p.is_absolute() => p.clone(),
            LawConfig::Learned { params_file: Some(p) } => self.config_dir.join(p),
            _ => self.out_path(PARAMS_JSON),
        }
    }

    /// The frozen endpoint pairs shared by training and evaluation.
    pub fn training_set(&self, n: usize) -> Result<TrainingSet> {
        let coupling = self.config.coupling(&self.config_dir, n)?;
        TrainingSet::draw(&coupling, self.config.train.dataset_size, self.seed())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub system: String,
    pub rank: RankReport,
    /// Condition number of `Φ_1`; infinite when singular.
    pub gramian_condition: f64,
}

impl CheckReport {
    pub fn controllable(&self) -> bool {
        self.rank.controllable
    }
}

pub fn cmd_check(ctx: &RunContext) -> Result<CheckReport> {
    let sys = ctx.system()?;
    let rank = is_controllable(&sys.a, &sys.b)?;
    let phi = linalg::gramian(&sys.a, &sys.b, 1.0)?;
    let (min, max) = phi.eigen_extremes();
    let gramian_condition = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(CheckReport {
        system: sys.name,
        rank,
        gramian_condition,
    })
}

/// Stochastic bridges between independent endpoint draws, with their controls.
pub fn cmd_bridge(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let kernel = ctx.kernel()?;
    let cfg = ctx.config.bridge;
    if cfg.paths == 0 {
        return Err(Error::invalid("bridge.paths must be positive"));
    }
    let coupling = ctx.config.coupling(&ctx.config_dir, kernel.n())?;
    let pairs = coupling.draw_pairs(cfg.paths, &mut rng::stream(ctx.seed(), rng::BRIDGE))?;
    let rows = |f: fn(&crate::bridge::EndpointPair) -> &Vector| -> Result<SampleSet> {
        SampleSet::from_vectors(&pairs.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
    };
    let init = rows(|p| &p.x)?;
    let law = FlowField::PointBridge(rows(|p| &p.y)?);
    let opts = RolloutOptions {
        dt: cfg.dt,
        seed: ctx.seed(),
        record_stride: if cfg.full_resolution { 1 } else { cfg.stride },
        ..RolloutOptions::default()
    };
    let batch = rollout::rollout(&kernel, &law, &init, &opts)?;

    ctx.ensure_out_dir()?;
    let (n, m) = (kernel.n(), kernel.m());
    let mut cols = vec!["path_id".to_string(), "t".to_string()];
    cols.extend(io::numbered("x", n));
    cols.extend(io::numbered("u", m));
    let mut w = CsvOut::create(&ctx.out_path(BRIDGES_CSV), &ctx.run_id, &cols)?;
    let mut vals = vec![0.0; 1 + n + m];
    for p in 0..batch.paths {
        for (k, &t) in batch.times.iter().enumerate() {
            let x = batch.state(k, p);
            let u = law.eval(&kernel, t, x, p)?;
            vals[0] = t;
            vals[1..1 + n].copy_from_slice(x);
            vals[1 + n..].copy_from_slice(&u);
            w.record(&[p as u64], &vals)?;
        }
    }
    w.finish()?;
    ctx.finish("bridge", &[(BRIDGES_CSV, "bridges")])
}

pub fn cmd_train(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let kernel = ctx.kernel()?;
    let coupling = ctx.config.coupling(&ctx.config_dir, kernel.n())?;
    let outcome = trainer::train(&kernel, &coupling, &ctx.config.train_config())?;

    ctx.ensure_out_dir()?;
    io::write_params(&ctx.out_path(PARAMS_JSON), &outcome.params, &ctx.run_id)?;
    let mut w = CsvOut::create(&ctx.out_path(LOSS_CSV), &ctx.run_id, &["iteration".into(), "loss".into()])?;
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        w.record(&[i as u64], &[*l])?;
    }
    w.finish()?;
    let n = kernel.n();
    let mut cols = io::numbered("x", n);
    cols.extend(io::numbered("y", n));
    let mut w = CsvOut::create(&ctx.out_path(TRAINING_PAIRS_CSV), &ctx.run_id, &cols)?;
    for p in &outcome.training_set.pairs {
        let row: Vec<f64> = p.x.iter().chain(p.y.iter()).copied().collect();
        w.record(&[], &row)?;
    }
    w.finish()?;
    ctx.finish(
        "train",
        &[
            (PARAMS_JSON, "parameters"),
            (LOSS_CSV, "loss_trace"),
            (TRAINING_PAIRS_CSV, "training_samples"),
        ],
    )
}

/// The configured feedback law.
pub fn build_law(ctx: &RunContext, kernel: &Arc<BridgeKernel>, p0: &Distribution, p1: &Distribution) -> Result<FlowField> {
    match &ctx.config.law {
        LawConfig::ClosedForm => {
            let (Some(g0), Some(g1)) = (p0.as_mixture(), p1.as_mixture()) else {
                return Err(Error::invalid(
                    "closed-form law needs a Gaussian P0 and a Gaussian-mixture P1",
                ));
            };
            let ctx = MixtureLawContext::new(kernel.clone(), g0, g1.clone())?;
            Ok(FlowField::ClosedForm(Arc::new(ctx)))
        }
        LawConfig::Learned { .. } => {
            let path = ctx.params_path();
            if !path.exists() {
                return Err(Error::invalid(format!(
                    "learned law needs trained parameters at {}; run `train` first",
                    path.display()
                )));
            }
            Ok(FlowField::Learned(Arc::new(io::read_params(&path)?)))
        }
    }
}

pub fn cmd_rollout(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let kernel = Arc::new(ctx.kernel()?);
    let coupling = ctx.config.coupling(&ctx.config_dir, kernel.n())?;
    let law = build_law(ctx, &kernel, &coupling.p0, &coupling.p1)?;
    let cfg = ctx.config.rollout;
    if cfg.paths == 0 || cfg.stride == 0 {
        return Err(Error::invalid("rollout.paths and rollout.stride must be positive"));
    }
    let init = coupling.p0.sample(cfg.paths, &mut rng::stream(ctx.seed(), rng::INITIAL))?;
    let opts = RolloutOptions {
        dt: cfg.dt,
        seed: ctx.seed(),
        record_stride: cfg.record_stride(),
        ..RolloutOptions::default()
    };
    let batch = rollout::rollout(&kernel, &law, &init, &opts)?;
    let targets = coupling.p1.sample(cfg.paths, &mut rng::stream(ctx.seed(), rng::TARGET))?;

    ctx.ensure_out_dir()?;
    io::write_trajectories_csv(&ctx.out_path(TRAJECTORIES_CSV), &ctx.run_id, &batch)?;
    io::write_samples_csv(&ctx.out_path(TERMINAL_CSV), &ctx.run_id, &batch.terminal(), "x")?;
    io::write_samples_csv(&ctx.out_path(TARGET_CSV), &ctx.run_id, &targets, "x")?;
    ctx.finish(
        "rollout",
        &[
            (TRAJECTORIES_CSV, "trajectories"),
            (TERMINAL_CSV, "terminal_samples"),
            (TARGET_CSV, "target_samples"),
        ],
    )
}

#[derive(Debug, Clone, Serialize)]
struct MetricsSummary<'a> {
    run_id: &'a str,
    mmd_bandwidth: f64,
    mmd_normalizer: f64,
    w2_reference: f64,
    terminal_mmd_normalized: f64,
    terminal_w2: f64,
    terminal_w2_std_err: f64,
    kde_bandwidth: f64,
    density_components: [usize; 2],
}

/// Metric curves against regenerated bridge samples, plus the terminal KDE.
pub fn cmd_eval(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let traj_path = ctx.out_path(TRAJECTORIES_CSV);
    if !traj_path.exists() {
        return Err(Error::invalid(format!(
            "evaluation needs {}; run `rollout` first",
            traj_path.display()
        )));
    }
    let kernel = ctx.kernel()?;
    let n = kernel.n();
    let coupling = ctx.config.coupling(&ctx.config_dir, n)?;
    let meta = TrajectoryMeta {
        seed: ctx.seed(),
        system: kernel.system().name.clone(),
        law: match ctx.config.law {
            LawConfig::ClosedForm => "closed_form".into(),
            LawConfig::Learned { .. } => "learned".into(),
        },
        dt: ctx.config.rollout.dt,
        epsilon: kernel.epsilon(),
    };
    let batch = io::read_trajectories_csv(&traj_path, meta)?;
    if batch.dim != n {
        return Err(Error::dim(format!(
            "trajectories have dimension {}, system has n = {n}",
            batch.dim
        )));
    }
    let pairs = TrainingSet::draw(&coupling, ctx.config.train.dataset_size, ctx.seed())?.pairs;
    let curve = metrics::evaluate(&kernel, &batch, &pairs, &ctx.config.eval.options(), ctx.seed())?;

    let dens = ctx.config.eval.density;
    let comps = dens.components.unwrap_or([n.saturating_sub(2), n - 1]);
    if n < 2 || comps.iter().any(|&c| c >= n) || comps[0] == comps[1] {
        return Err(Error::invalid(format!("density components {comps:?} invalid for n = {n}")));
    }
    let terminal = batch.terminal().project(&comps)?;
    let bandwidth = dens.bandwidth.unwrap_or_else(|| metrics::scott_bandwidth(&terminal));
    let grid = Grid2::covering(&terminal, dens.pad, bandwidth, dens.nodes)?;
    let kde = metrics::kde2(&terminal, &grid, bandwidth)?;
    let exact = match coupling.p1.as_mixture() {
        Some(gm) => Some(gm.marginal(&comps)?),
        None => None,
    };

    ctx.ensure_out_dir()?;
    write_metrics_csv(&ctx.out_path(METRICS_CSV), &ctx.run_id, &curve)?;
    let mut cols = vec!["x".to_string(), "y".to_string(), "kde".to_string()];
    if exact.is_some() {
        cols.push("log_density".into());
    }
    let mut w = CsvOut::create(&ctx.out_path(DENSITY_CSV), &ctx.run_id, &cols)?;
    let (xs, ys) = (grid.xs(), grid.ys());
    for (j, y) in ys.iter().enumerate() {
        for (i, x) in xs.iter().enumerate() {
            let mut row = vec![*x, *y, kde[j * grid.nx + i]];
            if let Some(gm) = &exact {
                row.push(log_density(gm, &Vector::from_vec(vec![*x, *y]))?);
            }
            w.record(&[], &row)?;
        }
    }
    w.finish()?;
    let last = curve.times.len() - 1;
    let summary = MetricsSummary {
        run_id: &ctx.run_id,
        mmd_bandwidth: ctx.config.eval.mmd.bandwidth,
        mmd_normalizer: curve.normalizer,
        w2_reference: curve.w2_reference,
        terminal_mmd_normalized: curve.mmd_normalized[last],
        terminal_w2: curve.w2[last],
        terminal_w2_std_err: curve.w2_std_err[last],
        kde_bandwidth: bandwidth,
        density_components: comps,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    let summary_path = ctx.out_path(METRICS_SUMMARY_JSON);
    fs::write(&summary_path, text).map_err(|e| Error::io(format!("writing {}", summary_path.display()), e))?;
    ctx.finish(
        "eval",
        &[
            (METRICS_CSV, "metrics"),
            (METRICS_SUMMARY_JSON, "metrics_summary"),
            (DENSITY_CSV, "density"),
        ],
    )
}

pub fn write_metrics_csv(path: &Path, run_id: &str, curve: &MetricCurve) -> Result<()> {
    let cols = ["t", "mmd", "mmd_normalized", "w2"].map(String::from);
    let mut w = CsvOut::create(path, run_id, &cols)?;
    for k in 0..curve.times.len() {
        w.record(&[], &[curve.times[k], curve.mmd[k], curve.mmd_normalized[k], curve.w2[k]])?;
    }
    w.finish()
}
