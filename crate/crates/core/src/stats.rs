//! Benchmark statistics and Mahalanobis (T²) scoring.
//!
//! A [`BenchmarkStats`] summarises a dataset by its sample mean and unbiased
//! sample covariance. Scoring a point against it yields the squared
//! Mahalanobis distance `(p - μ)ᵀ Σ⁻¹ (p - μ)`. The inverse is computed once
//! at fit time through a Cholesky factorization of `Σ + εI`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io;

/// Relative factor for the default diagonal regularization: `ε = 1e-8 · tr(Σ)/n`.
pub const DEFAULT_RELATIVE_REGULARIZATION: f64 = 1e-8;

/// A set of equally-dimensioned observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<DVector<f64>>,
    channel_names: Vec<String>,
    sample_time: f64,
}

impl Dataset {
    pub fn new(
        observations: Vec<DVector<f64>>,
        channel_names: Vec<String>,
        sample_time: f64,
    ) -> Result<Self> {
        let dim = channel_names.len();
        if dim == 0 {
            return Err(Error::InvalidInput("dataset needs at least one channel".into()));
        }
        for obs in &observations {
            check_dim("dataset observation", dim, obs.len())?;
        }
        Ok(Self {
            observations,
            channel_names,
            sample_time,
        })
    }

    /// Builds a dataset from plain rows with generated channel names `z0, z1, …`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
        let names = (0..dim).map(|i| format!("z{i}")).collect();
        let obs = rows.iter().map(|r| DVector::from_column_slice(r)).collect();
        Self::new(obs, names, 1.0)
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn dim(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

pub fn mean(data: &Dataset) -> Result<DVector<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("mean of an empty dataset".into()));
    }
    let mut acc = DVector::zeros(data.dim());
    for obs in data.observations() {
        acc += obs;
    }
    Ok(acc / data.len() as f64)
}

/// Unbiased sample covariance (divisor `N - 1`), explicitly symmetrized.
pub fn covariance(data: &Dataset) -> Result<DMatrix<f64>> {
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "covariance needs at least 2 observations, got {}",
            data.len()
        )));
    }
    let mu = mean(data)?;
    let n = data.dim();
    let mut cov = DMatrix::zeros(n, n);
    for obs in data.observations() {
        let dev = obs - &mu;
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    cov /= (data.len() - 1) as f64;
    Ok(symmetrize(&cov))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Default regularization for a covariance matrix: `1e-8 · tr(Σ)/n`.
pub fn default_regularization(covariance: &DMatrix<f64>) -> f64 {
    DEFAULT_RELATIVE_REGULARIZATION * covariance.trace() / covariance.nrows() as f64
}

/// Mean, covariance and regularized inverse covariance of a benchmark dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkStats {
    channel_names: Vec<String>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    inverse_covariance: DMatrix<f64>,
    regularization: f64,
}

pub fn fit_benchmark(data: &Dataset, regularization: f64) -> Result<BenchmarkStats> {
    let mu = mean(data)?;
    let cov = covariance(data)?;
    BenchmarkStats::from_parts(data.channel_names().to_vec(), mu, cov, regularization)
}

/// Fits with the default relative regularization.
pub fn fit_benchmark_default(data: &Dataset) -> Result<BenchmarkStats> {
    let cov = covariance(data)?;
    let eps = default_regularization(&cov);
    BenchmarkStats::from_parts(data.channel_names().to_vec(), mean(data)?, cov, eps)
}

impl BenchmarkStats {
    pub fn from_parts(
        channel_names: Vec<String>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        regularization: f64,
    ) -> Result<Self> {
        let n = mean.len();
        check_dim("benchmark channel names", n, channel_names.len())?;
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "benchmark covariance",
                expected: n,
                actual: covariance.nrows(),
            });
        }
        if !(regularization >= 0.0) || !regularization.is_finite() {
            return Err(Error::InvalidInput(format!(
                "regularization must be a finite non-negative number, got {regularization}"
            )));
        }
        let regularized = &covariance + DMatrix::identity(n, n) * regularization;
        let chol = Cholesky::new(regularized).ok_or_else(|| {
            let max_var = covariance.diagonal().amax();
            let channels = (0..n)
                .filter(|&i| covariance[(i, i)] <= f64::EPSILON * max_var.max(f64::MIN_POSITIVE))
                .map(|i| channel_names[i].clone())
                .collect();
            Error::DegenerateBenchmark { channels }
        })?;
        let inverse_covariance = symmetrize(&chol.inverse());
        Ok(Self {
            channel_names,
            mean,
            covariance,
            inverse_covariance,
            regularization,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn inverse_covariance(&self) -> &DMatrix<f64> {
        &self.inverse_covariance
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// Squared Mahalanobis distance of `point` from the benchmark mean.
    pub fn t_squared(&self, point: &[f64]) -> Result<f64> {
        check_dim("t_squared point", self.dim(), point.len())?;
        Ok(self.t_squared_unchecked(point))
    }

    pub(crate) fn t_squared_unchecked(&self, point: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let di = point[i] - self.mean[i];
            let mut row = 0.0;
            for j in 0..n {
                row += self.inverse_covariance[(i, j)] * (point[j] - self.mean[j]);
            }
            acc += di * row;
        }
        acc.max(0.0)
    }

    /// T² of every observation of a monitoring set.
    pub fn t_squared_batch(&self, monitoring: &Dataset) -> Result<Vec<f64>> {
        check_dim("monitoring dataset", self.dim(), monitoring.dim())?;
        Ok(monitoring
            .observations()
            .iter()
            .map(|obs| self.t_squared_unchecked(obs.as_slice()))
            .collect())
    }

    /// Gradient of T² with respect to the point: `2 Σ⁻¹ (p - μ)`.
    pub fn t_squared_gradient(&self, point: &[f64]) -> Result<DVector<f64>> {
        check_dim("t_squared_gradient point", self.dim(), point.len())?;
        let mut grad = vec![0.0; self.dim()];
        self.t_squared_with_gradient(point, &mut grad);
        Ok(DVector::from_vec(grad))
    }

    /// Writes `∇T²` into `grad` and returns T². No dimension checks.
    pub(crate) fn t_squared_with_gradient(&self, point: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.inverse_covariance[(i, j)] * (point[j] - self.mean[j]);
            }
            grad[i] = 2.0 * row;
            acc += (point[i] - self.mean[i]) * row;
        }
        acc.max(0.0)
    }

    pub fn to_document(&self) -> BenchmarkDocument {
        BenchmarkDocument {
            channel_names: self.channel_names.clone(),
            mean: self.mean.iter().copied().collect(),
            covariance: row_major(&self.covariance),
            regularization: self.regularization,
        }
    }

    pub fn from_document(doc: BenchmarkDocument) -> Result<Self> {
        let n = doc.mean.len();
        check_dim("benchmark covariance entries", n * n, doc.covariance.len())?;
        let cov = DMatrix::from_row_slice(n, n, &doc.covariance);
        Self::from_parts(
            doc.channel_names,
            DVector::from_vec(doc.mean),
            cov,
            doc.regularization,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, &self.to_document())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_document(io::read_json(path)?)
    }
}

/// Serialized form of [`BenchmarkStats`]; the inverse is recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDocument {
    pub channel_names: Vec<String>,
    pub mean: Vec<f64>,
    /// Row-major `n × n`.
    pub covariance: Vec<f64>,
    pub regularization: f64,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
