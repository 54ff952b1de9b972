//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::{Coupling, DistributionSpec};
use crate::error::{Error, Result};
use crate::linalg::matrix_from_rows;
use crate::metrics::{EvalOptions, MmdConfig, W2Config};
use crate::systems::{builtin_system, LinearSystem, DEFAULT_DELTA, DEFAULT_GRID_SIZE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Built-in name, or a label when `a` and `b` are given.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1.0
}

impl SystemConfig {
    pub fn build(&self) -> Result<LinearSystem> {
        match (&self.a, &self.b) {
            (Some(a), Some(b)) => LinearSystem::new(
                self.name.clone().unwrap_or_else(|| "custom".into()),
                matrix_from_rows(a)?,
                matrix_from_rows(b)?,
                self.epsilon,
            ),
            (None, None) => {
                let name = self
                    .name
                    .as_deref()
                    .ok_or_else(|| Error::invalid("system needs `name` or both `a` and `b`"))?;
                builtin_system(name)?.with_epsilon(self.epsilon)
            }
            _ => Err(Error::invalid("system matrices `a` and `b` must be given together")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub grid_size: usize,
    pub delta: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            grid_size: DEFAULT_GRID_SIZE,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawConfig {
    #[default]
    ClosedForm,
    Learned {
        /// Trained parameters; defaults to `params.json` in the output directory.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub paths: usize,
    pub dt: f64,
    /// Write every step instead of every `stride`-th.
    pub full_resolution: bool,
    pub stride: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            paths: 2000,
            dt: 1e-3,
            full_resolution: false,
            stride: 10,
        }
    }
}

impl RolloutConfig {
    pub fn record_stride(&self) -> usize {
        if self.full_resolution {
            1
        } else {
            self.stride
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Grid nodes per axis.
    pub nodes: usize,
    /// Half-width of the grid in sample standard deviations.
    pub pad: f64,
    /// KDE bandwidth; Scott's rule when absent.
    pub bandwidth: Option<f64>,
    /// Two state components to project onto; the last two when absent.
    pub components: Option<[usize; 2]>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            nodes: 101,
            pad: 5.0,
            bandwidth: None,
            components: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mmd: MmdConfig,
    pub w2: W2Config,
    /// Most evaluation times along the recorded grid.
    pub max_times: usize,
    pub density: DensityConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let m = EvalOptions::default();
        EvalConfig {
            mmd: m.mmd,
            w2: m.w2,
            max_times: m.max_times,
            density: DensityConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            mmd: self.mmd,
            w2: self.w2,
            max_times: self.max_times,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub paths: usize,
    pub dt: f64,
    pub full_resolution: bool,
    pub stride: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            paths: 20,
            dt: 1e-3,
            full_resolution: false,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub p0: DistributionSpec,
    pub p1: DistributionSpec,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub law: LawConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: context.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_json(&text, &format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&canonical))
    }

    /// Identifier shared by every artifact produced from this config and seed.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.hash().as_bytes());
        h.update(self.seed.to_le_bytes());
        hex(&h.finalize())[..16].to_string()
    }

    /// Training settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Builds the coupling, resolving empirical files against `base`, and
    /// checks it against the system dimension.
    pub fn coupling(&self, base: &Path, n: usize) -> Result<Coupling> {
        let coupling = Coupling::independent(self.p0.resolve(base)?, self.p1.resolve(base)?)?;
        if coupling.dim() != n {
            return Err(Error::dim(format!(
                "distributions have dimension {}, system has n = {n}",
                coupling.dim()
            )));
        }
        Ok(coupling)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "system": {"name": "double_integrator"},
        "p0": {"kind": "gaussian", "mean": [0, 0], "cov": [[1, 0], [0, 1]]},
        "p1": {"kind": "gaussian", "mean": [2, 0], "cov": [[1, 0], [0, 1]]}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL, "test").unwrap();
        assert_eq!(c.law, LawConfig::ClosedForm);
        assert_eq!(c.rollout.paths, 2000);
        assert_eq!(c.train.iterations, 10_000);
        assert_eq!(c.eval.mmd.bandwidth, 2.0);
        assert_eq!(c.system.epsilon, 1.0);
        assert_eq!(c.train_config().seed, 3);
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_json(MINIMAL, "test").unwrap();
        let again = RunConfig::from_json(&c.to_json(), "again").unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn seed_changes_run_id() {
        let a = RunConfig::from_json(MINIMAL, "test").unwrap();
        let b = RunConfig { seed: 4, ..a.clone() };
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn missing_seed_and_unknown_keys() {
        let no_seed = MINIMAL.replace("\"seed\": 3,", "");
        assert!(RunConfig::from_json(&no_seed, "test").is_err());
        let extra = MINIMAL.replace("\"seed\": 3,", "\"seed\": 3, \"sede\": 1,");
        let err = RunConfig::from_json(&extra, "test").unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn explicit_matrices() {
        let s = SystemConfig {
            name: None,
            a: Some(vec![vec![0.0, 1.0], vec![0.0, 0.0]]),
            b: Some(vec![vec![0.0], vec![1.0]]),
            epsilon: 0.5,
        };
        let sys = s.build().unwrap();
        assert_eq!((sys.n(), sys.m(), sys.epsilon), (2, 1, 0.5));
        let half = SystemConfig { b: None, ..s };
        assert!(half.build().is_err());
    }
}
