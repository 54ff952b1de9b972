//! Initial/target distributions, their samplers and densities, and the
//! independent coupling of two distributions.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::EndpointPair;
use crate::error::{Error, Result};
use crate::linalg::{self, matrix_from_rows, psd_sqrt, Matrix, PsdMatrix, Vector};
use crate::samples::SampleSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vector,
    pub cov: PsdMatrix,
    sqrt_cov: Matrix,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vector, cov: PsdMatrix) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!("mixture weight {weight} must be >= 0")));
        }
        if cov.dim() != mean.len() {
            return Err(Error::dim(format!(
                "component mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        let sqrt_cov = psd_sqrt(&cov)?;
        Ok(GaussianComponent {
            weight,
            mean,
            cov,
            sqrt_cov,
        })
    }

    pub fn sqrt_cov(&self) -> &Matrix {
        &self.sqrt_cov
    }
}

/// Weighted sum of Gaussians; a single component is a plain Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let n = first.mean.len();
        if components.iter().any(|c| c.mean.len() != n) {
            return Err(Error::dim("mixture components have different dimensions"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(GaussianMixture { components })
    }

    pub fn gaussian(mean: Vector, cov: PsdMatrix) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, cov)?])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Marginal on a subset of coordinates.
    pub fn marginal(&self, idx: &[usize]) -> Result<GaussianMixture> {
        let n = self.dim();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim(format!("marginal indices {idx:?} invalid for n = {n}")));
        }
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mean = Vector::from_fn(idx.len(), |i, _| c.mean[idx[i]]);
                let cov = Matrix::from_fn(idx.len(), idx.len(), |i, j| c.cov[(idx[i], idx[j])]);
                GaussianComponent::new(c.weight, mean, PsdMatrix::from_symmetric_part(&cov))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(comps)
    }

    fn sample_into<R: rand::Rng + ?Sized>(&self, rng: &mut R, pick: &Option<WeightedIndex<f64>>, out: &mut Vec<f64>) {
        let l = match pick {
            Some(w) => w.sample(rng),
            None => 0,
        };
        let c = &self.components[l];
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &c.mean + &c.sqrt_cov * z;
        out.extend(x.iter());
    }
}

/// `log Σ_l w_l N(xi; m_l, Q_l)` with a max-shifted log-sum-exp.
pub fn log_density(gm: &GaussianMixture, xi: &Vector) -> Result<f64> {
    if xi.len() != gm.dim() {
        return Err(Error::dim(format!(
            "point has dimension {}, mixture has {}",
            xi.len(),
            gm.dim()
        )));
    }
    let n = gm.dim() as f64;
    let mut terms = Vec::with_capacity(gm.components.len());
    for c in &gm.components {
        let chol = linalg::spd_factor(&c.cov)?;
        if c.weight == 0.0 {
            continue;
        }
        let r = xi - &c.mean;
        let quad = r.dot(&chol.solve(&r));
        terms.push(c.weight.ln() - 0.5 * (quad + linalg::log_det(&chol) + n * (2.0 * PI).ln()));
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

/// Distribution description as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Mixture {
        components: Vec<ComponentSpec>,
    },
    /// Uniform on the circle (circumference) of the given radius.
    UniformCircle {
        center: Vec<f64>,
        radius: f64,
    },
    /// Resamples rows of a CSV file (one sample per row, no header required).
    Empirical {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// A sampler built from a [`DistributionSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Mixture(GaussianMixture),
    Circle { center: Vector, radius: f64 },
    Empirical(SampleSet),
}

impl DistributionSpec {
    /// Builds the sampler; relative empirical paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<Distribution> {
        match self {
            DistributionSpec::Gaussian { mean, cov } => {
                let cov = PsdMatrix::new(matrix_from_rows(cov)?)?;
                Ok(Distribution::Mixture(GaussianMixture::gaussian(
                    Vector::from_column_slice(mean),
                    cov,
                )?))
            }
            DistributionSpec::Mixture { components } => {
                let comps = components
                    .iter()
                    .map(|c| {
                        GaussianComponent::new(
                            c.weight,
                            Vector::from_column_slice(&c.mean),
                            PsdMatrix::new(matrix_from_rows(&c.cov)?)?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Distribution::Mixture(GaussianMixture::new(comps)?))
            }
            DistributionSpec::UniformCircle { center, radius } => {
                if center.len() != 2 {
                    return Err(Error::dim("uniform_circle needs a 2-D center"));
                }
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::invalid(format!("circle radius {radius} must be >= 0")));
                }
                Ok(Distribution::Circle {
                    center: Vector::from_column_slice(center),
                    radius: *radius,
                })
            }
            DistributionSpec::Empirical { path } => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                Ok(Distribution::Empirical(crate::io::read_samples_csv(&full)?))
            }
        }
    }
}

impl Distribution {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Mixture(gm) => gm.dim(),
            Distribution::Circle { .. } => 2,
            Distribution::Empirical(s) => s.dim(),
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Distribution::Mixture(gm) => Some(gm),
            _ => None,
        }
    }

    /// `count` i.i.d. draws.
    pub fn sample<R: rand::Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<SampleSet> {
        if count == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let mut out = Vec::with_capacity(count * self.dim());
        match self {
            Distribution::Mixture(gm) => {
                let pick = if gm.components.len() > 1 {
                    Some(
                        WeightedIndex::new(gm.components.iter().map(|c| c.weight))
                            .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?,
                    )
                } else {
                    None
                };
                for _ in 0..count {
                    gm.sample_into(rng, &pick, &mut out);
                }
            }
            Distribution::Circle { center, radius } => {
                for _ in 0..count {
                    let angle = rng.random::<f64>() * 2.0 * PI;
                    let (s, c) = angle.sin_cos();
                    out.push(center[0] + radius * c);
                    out.push(center[1] + radius * s);
                }
            }
            Distribution::Empirical(rows) => {
                for _ in 0..count {
                    let i = rng.random_range(0..rows.len());
                    out.extend_from_slice(rows.row(i));
                }
            }
        }
        SampleSet::new(self.dim(), out)
    }
}

/// Independent coupling `P0 ⊗ P1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub p0: Distribution,
    pub p1: Distribution,
}

impl Coupling {
    pub fn independent(p0: Distribution, p1: Distribution) -> Result<Self> {
        if p0.dim() != p1.dim() {
            return Err(Error::dim(format!(
                "P0 has dimension {} but P1 has {}",
                p0.dim(),
                p1.dim()
            )));
        }
        Ok(Coupling { p0, p1 })
    }

    pub fn dim(&self) -> usize {
        self.p0.dim()
    }

    /// `count` pairs `(x, y)` with `x ~ P0` and `y ~ P1` drawn independently.
    pub fn draw_pairs<R: rand::Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<EndpointPair>> {
        let xs = self.p0.sample(count, rng)?;
        let ys = self.p1.sample(count, rng)?;
        Ok(xs
            .rows()
            .zip(ys.rows())
            .map(|(x, y)| EndpointPair {
                x: Vector::from_column_slice(x),
                y: Vector::from_column_slice(y),
            })
            .collect())
    }
}
