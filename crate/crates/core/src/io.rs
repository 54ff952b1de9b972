//! Artifact files: CSV tables, trained parameters and the run manifest.
//!
//! Every CSV starts with a `# run_id=<id>` line followed by a column header.
//! Numbers are written with 17 significant digits so reruns compare
//! byte-for-byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Architecture, MlpParams};
use crate::rollout::{TrajectoryBatch, TrajectoryMeta};
use crate::samples::SampleSet;

pub const RUN_ID_PREFIX: &str = "# run_id=";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!("bridgeflow ", env!("CARGO_PKG_VERSION"));

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

/// Streaming CSV writer with the run-id preamble.
pub struct CsvOut {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
    line: String,
}

impl CsvOut {
    pub fn create(path: &Path, run_id: &str, columns: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = CsvOut {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: columns.len(),
            line: String::new(),
        };
        w.write_line(&format!("{RUN_ID_PREFIX}{run_id}"))?;
        w.write_line(&columns.join(","))?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }

    /// Integer columns first, then floating-point columns.
    pub fn record(&mut self, ints: &[u64], values: &[f64]) -> Result<()> {
        if ints.len() + values.len() != self.columns {
            return Err(Error::dim(format!(
                "{} fields for {} columns in {}",
                ints.len() + values.len(),
                self.columns,
                self.path.display()
            )));
        }
        let mut line = std::mem::take(&mut self.line);
        line.clear();
        for (k, i) in ints.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&i.to_string());
        }
        for (k, v) in values.iter().enumerate() {
            if k > 0 || !ints.is_empty() {
                line.push(',');
            }
            line.push_str(&fmt_f64(*v));
        }
        let res = self.write_line(&line);
        self.line = line;
        res
    }

    pub fn finish(mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| Error::io(format!("flushing {}", self.path.display()), e))
    }
}

pub fn write_samples_csv(path: &Path, run_id: &str, samples: &SampleSet, prefix: &str) -> Result<()> {
    let mut w = CsvOut::create(path, run_id, &numbered(prefix, samples.dim()))?;
    for row in samples.rows() {
        w.record(&[], row)?;
    }
    w.finish()
}

/// Trajectory table `path_id, t, x_1..x_n`, grouped by path.
pub fn write_trajectories_csv(path: &Path, run_id: &str, batch: &TrajectoryBatch) -> Result<()> {
    let mut cols = vec!["path_id".to_string(), "t".to_string()];
    cols.extend(numbered("x", batch.dim));
    let mut w = CsvOut::create(path, run_id, &cols)?;
    let mut vals = vec![0.0; batch.dim + 1];
    for p in 0..batch.paths {
        for (k, t) in batch.times.iter().enumerate() {
            vals[0] = *t;
            vals[1..].copy_from_slice(batch.state(k, p));
            w.record(&[p as u64], &vals)?;
        }
    }
    w.finish()
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Malformed {
        context: path.display().to_string(),
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file))
}

/// Numeric rows of a CSV file. Comment lines and a non-numeric first row
/// (a header) are skipped.
pub fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (k, rec) in reader(path)?.records().enumerate() {
        let rec = rec.map_err(|source| Error::Csv {
            context: format!("reading {}", path.display()),
            source,
        })?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(malformed(path, format!("record {}: {e}", k + 1))),
        }
    }
    Ok(rows)
}

pub fn read_samples_csv(path: &Path) -> Result<SampleSet> {
    let rows = read_numeric_rows(path)?;
    if rows.is_empty() {
        return Err(malformed(path, "no samples"));
    }
    SampleSet::from_rows(&rows).map_err(|e| malformed(path, e.to_string()))
}

/// The `run_id` recorded in the first line of a CSV file, if any.
pub fn csv_run_id(path: &Path) -> Result<Option<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(RUN_ID_PREFIX))
        .map(|s| s.trim().to_string()))
}

/// Reads a trajectory table back into a batch; rows must be grouped by path
/// with every path on the same time grid.
pub fn read_trajectories_csv(path: &Path, meta: TrajectoryMeta) -> Result<TrajectoryBatch> {
    let rows = read_numeric_rows(path)?;
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if width < 3 {
        return Err(malformed(path, "expected columns path_id, t, x_1.."));
    }
    let dim = width - 2;
    let mut times = Vec::new();
    for r in &rows {
        if r[0] != 0.0 {
            break;
        }
        times.push(r[1]);
    }
    if times.is_empty() || rows.len() % times.len() != 0 {
        return Err(malformed(path, "paths do not share one time grid"));
    }
    let steps = times.len();
    let paths = rows.len() / steps;
    let mut states = vec![0.0; rows.len() * dim];
    for (i, r) in rows.iter().enumerate() {
        let (p, k) = (i / steps, i % steps);
        if r[0] != p as f64 || r[1] != times[k] {
            return Err(malformed(path, format!("unexpected path/time at data row {}", i + 1)));
        }
        let o = (k * paths + p) * dim;
        states[o..o + dim].copy_from_slice(&r[2..]);
    }
    Ok(TrajectoryBatch {
        times,
        paths,
        dim,
        states,
        meta,
    })
}

/// One affine layer in the parameter file; `weight` is row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub run_id: String,
    pub architecture: Architecture,
    pub activation: String,
    pub layers: Vec<LayerRecord>,
}

pub const PARAMS_FORMAT: &str = "bridgeflow-resmlp-v1";

impl ParamsFile {
    pub fn from_params(params: &MlpParams, run_id: &str) -> Self {
        let values = params.values();
        let layers = params
            .layers()
            .iter()
            .map(|l| LayerRecord {
                name: l.name.clone(),
                rows: l.rows,
                cols: l.cols,
                weight: values[l.offset..l.offset + l.weight_len()].to_vec(),
                bias: values[l.offset + l.weight_len()..l.offset + l.len()].to_vec(),
            })
            .collect();
        ParamsFile {
            format: PARAMS_FORMAT.into(),
            run_id: run_id.into(),
            architecture: params.architecture(),
            activation: "elu".into(),
            layers,
        }
    }

    pub fn to_params(&self) -> Result<MlpParams> {
        if self.format != PARAMS_FORMAT {
            return Err(Error::invalid(format!("unsupported parameter format `{}`", self.format)));
        }
        let expected = self.architecture.layers();
        if expected.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} layers for an architecture with {}",
                self.layers.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(self.architecture.param_count());
        for (spec, rec) in expected.iter().zip(&self.layers) {
            if spec.name != rec.name
                || spec.rows != rec.rows
                || spec.cols != rec.cols
                || rec.weight.len() != spec.weight_len()
                || rec.bias.len() != spec.rows
            {
                return Err(Error::dim(format!("layer `{}` does not match the architecture", rec.name)));
            }
            values.extend_from_slice(&rec.weight);
            values.extend_from_slice(&rec.bias);
        }
        MlpParams::from_values(self.architecture, values)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: format!("serializing {}", path.display()),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("parsing {}", path.display()),
        source,
    })
}

pub fn write_params(path: &Path, params: &MlpParams, run_id: &str) -> Result<()> {
    write_json(path, &ParamsFile::from_params(params, run_id))
}

pub fn read_params(path: &Path) -> Result<MlpParams> {
    read_json::<ParamsFile>(path)?.to_params()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub role: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub files: Vec<ManifestEntry>,
}

impl ArtifactManifest {
    pub fn new(run_id: &str, config_hash: &str, seed: u64) -> Self {
        ArtifactManifest {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            seed,
            tool_version: TOOL_VERSION.into(),
            files: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    /// Adds or replaces entries by path.
    pub fn merge(&mut self, entries: Vec<ManifestEntry>) {
        for e in entries {
            self.files.retain(|f| f.path != e.path);
            self.files.push(e);
        }
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
    }

    /// Writes through a temporary file and a rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        write_json(&tmp, self)?;
        let dest = dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &dest).map_err(|e| Error::io(format!("renaming manifest into {}", dest.display()), e))
    }

    /// Checks that every listed file exists and carries this run id.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = dir.join(&f.path);
            if !path.exists() {
                return Err(malformed(&path, "listed in the manifest but missing"));
            }
            let id = if f.path.ends_with(".json") {
                let v: serde_json::Value = read_json(&path)?;
                v.get("run_id").and_then(|s| s.as_str()).map(str::to_string)
            } else {
                csv_run_id(&path)?
            };
            if id.as_deref() != Some(self.run_id.as_str()) {
                return Err(malformed(&path, format!("run id {id:?} differs from {}", self.run_id)));
            }
        }
        Ok(())
    }
}

/// Merges `entries` into the directory's manifest, starting fresh when the
/// existing one belongs to another run.
pub fn update_manifest(dir: &Path, run_id: &str, config_hash: &str, seed: u64, entries: Vec<ManifestEntry>) -> Result<ArtifactManifest> {
    let mut manifest = match ArtifactManifest::load(dir) {
        Ok(Some(m)) if m.run_id == run_id => m,
        _ => ArtifactManifest::new(run_id, config_hash, seed),
    };
    manifest.tool_version = TOOL_VERSION.into();
    manifest.merge(entries);
    manifest.write_atomic(dir)?;
    Ok(manifest)
}
