//! Output combination and expert weighting.
//!
//! Four weighting strategies are provided: uniform averaging (AV), a
//! least-squares fit over recent measurements (LS), Mahalanobis weights frozen
//! at the previous input (MD-1), and Mahalanobis weights evaluated at every
//! predicted input (MD-2). The Mahalanobis rule is
//! `λᵢ(u) = (1/(T²ᵢ(u)+ε)) / Σⱼ 1/(T²ⱼ(u)+ε)`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::io;
use crate::recmodel::GruModel;
use crate::stats::BenchmarkStats;

pub const DEFAULT_EPSILON_MD: f64 = 1e-6;
/// LS look-back window in samples.
pub const DEFAULT_LS_WINDOW: usize = 100;
const LS_TIE_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Av,
    Ls,
    Md1,
    Md2,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Av, Strategy::Ls, Strategy::Md1, Strategy::Md2];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Av => "av",
            Strategy::Ls => "ls",
            Strategy::Md1 => "md1",
            Strategy::Md2 => "md2",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Av => "AV",
            Strategy::Ls => "LS",
            Strategy::Md1 => "MD-1",
            Strategy::Md2 => "MD-2",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "av" => Ok(Strategy::Av),
            "ls" => Ok(Strategy::Ls),
            "md1" => Ok(Strategy::Md1),
            "md2" => Ok(Strategy::Md2),
            other => Err(Error::Config(format!("unknown weighting strategy `{other}`"))),
        }
    }
}

/// Convex combination weights: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("weights must be non-negative: {values}")));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        weights_av(n)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Ordered experts with the benchmark statistics of their training inputs.
#[derive(Debug, Clone)]
pub struct Ensemble {
    experts: Vec<GruModel>,
    benchmarks: Vec<BenchmarkStats>,
    epsilon_md: f64,
}

impl Ensemble {
    pub fn new(
        experts: Vec<GruModel>,
        benchmarks: Vec<BenchmarkStats>,
        epsilon_md: f64,
    ) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::InvalidInput("an ensemble needs at least one expert".into()))?;
        check_dim("benchmark count", experts.len(), benchmarks.len())?;
        let (nu, ny) = (first.input_size(), first.output_size());
        for e in &experts {
            check_dim("expert input size", nu, e.input_size())?;
            check_dim("expert output size", ny, e.output_size())?;
        }
        for b in &benchmarks {
            check_dim("benchmark dimension", nu, b.dim())?;
        }
        if !(epsilon_md > 0.0) || !epsilon_md.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon_md must be positive, got {epsilon_md}")));
        }
        Ok(Self {
            experts,
            benchmarks,
            epsilon_md,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[GruModel] {
        &self.experts
    }

    pub fn benchmarks(&self) -> &[BenchmarkStats] {
        &self.benchmarks
    }

    pub fn epsilon_md(&self) -> f64 {
        self.epsilon_md
    }

    pub fn input_size(&self) -> usize {
        self.experts[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.experts[0].output_size()
    }

    pub fn with_epsilon(mut self, epsilon_md: f64) -> Result<Self> {
        if !(epsilon_md > 0.0) {
            return Err(Error::InvalidInput("epsilon_md must be positive".into()));
        }
        self.epsilon_md = epsilon_md;
        Ok(self)
    }

    /// Reorders experts (and their benchmarks): entry `i` of the result is
    /// expert `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        check_dim("permutation", self.len(), order.len())?;
        Self::new(
            order.iter().map(|&i| self.experts[i].clone()).collect(),
            order.iter().map(|&i| self.benchmarks[i].clone()).collect(),
            self.epsilon_md,
        )
    }

    /// T² of `input` against every benchmark.
    pub fn distances(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("ensemble input", self.input_size(), input.len())?;
        Ok(self.benchmarks.iter().map(|b| b.t_squared_unchecked(input)).collect())
    }

    /// Loads a manifest and every file it references (paths relative to the
    /// manifest's directory).
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Self, EnsembleManifest)> {
        let path = path.as_ref();
        let manifest: EnsembleManifest = io::read_json(path)?;
        let mut experts = Vec::new();
        let mut benchmarks = Vec::new();
        for entry in &manifest.experts {
            experts.push(GruModel::load(io::resolve_relative(path, &entry.model))?);
            benchmarks.push(BenchmarkStats::load(io::resolve_relative(path, &entry.benchmark))?);
        }
        let ensemble = Self::new(experts, benchmarks, manifest.epsilon_md)?;
        Ok((ensemble, manifest))
    }

    /// Writes every expert and benchmark next to the manifest.
    pub fn save_manifest(&self, path: impl AsRef<Path>, default_strategy: Strategy) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (i, (e, b)) in self.experts.iter().zip(&self.benchmarks).enumerate() {
            let model = PathBuf::from(format!("expert_{}.json", i + 1));
            let benchmark = PathBuf::from(format!("benchmark_{}.json", i + 1));
            e.save(dir.join(&model))?;
            b.save(dir.join(&benchmark))?;
            entries.push(ExpertEntry { model, benchmark });
        }
        io::write_json(
            path,
            &EnsembleManifest {
                experts: entries,
                epsilon_md: self.epsilon_md,
                default_strategy,
                ls_window: DEFAULT_LS_WINDOW,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub model: PathBuf,
    pub benchmark: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub experts: Vec<ExpertEntry>,
    #[serde(default = "default_epsilon")]
    pub epsilon_md: f64,
    #[serde(default = "default_strategy")]
    pub default_strategy: Strategy,
    #[serde(default = "default_ls_window")]
    pub ls_window: usize,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON_MD
}

fn default_strategy() -> Strategy {
    Strategy::Md2
}

fn default_ls_window() -> usize {
    DEFAULT_LS_WINDOW
}

/// `y = Σ λᵢ yᵢ`.
pub fn combine_outputs(outputs: &[DVector<f64>], weights: &WeightVector) -> Result<DVector<f64>> {
    check_dim("combined output count", weights.len(), outputs.len())?;
    let ny = outputs[0].len();
    let mut y = DVector::zeros(ny);
    for (o, w) in outputs.iter().zip(weights.as_slice()) {
        check_dim("combined output", ny, o.len())?;
        y.axpy(*w, o, 1.0);
    }
    Ok(y)
}

pub fn weights_av(n: usize) -> Result<WeightVector> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot average zero experts".into()));
    }
    Ok(WeightVector(DVector::from_element(n, 1.0 / n as f64)))
}

/// Mahalanobis weights from precomputed distances.
pub fn md_weights_from_distances(distances: &[f64], epsilon: f64) -> DVector<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + epsilon)).collect();
    let total: f64 = inv.iter().sum();
    DVector::from_iterator(inv.len(), inv.iter().map(|w| w / total))
}

pub fn weights_md(ensemble: &Ensemble, input: &[f64]) -> Result<WeightVector> {
    let d = ensemble.distances(input)?;
    Ok(WeightVector(md_weights_from_distances(&d, ensemble.epsilon_md)))
}

/// `∂λ/∂u` (`n × n_u`) of the Mahalanobis weights.
pub fn weights_md_jacobian(ensemble: &Ensemble, input: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("ensemble input", ensemble.input_size(), input.len())?;
    let mut jac = DMatrix::zeros(ensemble.len(), input.len());
    let mut lambda = vec![0.0; ensemble.len()];
    md_weights_with_jacobian(ensemble, input, &mut lambda, &mut jac);
    Ok(jac)
}

/// Writes λ(u) and ∂λ/∂u without dimension checks.
pub(crate) fn md_weights_with_jacobian(
    ensemble: &Ensemble,
    input: &[f64],
    lambda: &mut [f64],
    jac: &mut DMatrix<f64>,
) {
    let n = ensemble.len();
    let nu = input.len();
    let eps = ensemble.epsilon_md;
    let mut grad = vec![0.0; nu];
    // dw_i/du = -w_i² ∇T²_i
    let mut w = vec![0.0; n];
    let mut dw = DMatrix::zeros(n, nu);
    for (i, b) in ensemble.benchmarks.iter().enumerate() {
        let t2 = b.t_squared_with_gradient(input, &mut grad);
        w[i] = 1.0 / (t2 + eps);
        for j in 0..nu {
            dw[(i, j)] = -w[i] * w[i] * grad[j];
        }
    }
    let total: f64 = w.iter().sum();
    for i in 0..n {
        lambda[i] = w[i] / total;
    }
    for j in 0..nu {
        let dsum: f64 = (0..n).map(|i| dw[(i, j)]).sum();
        for i in 0..n {
            jac[(i, j)] = (dw[(i, j)] - lambda[i] * dsum) / total;
        }
    }
}

/// MD weights at the previous applied input, held over the horizon.
pub fn weights_md1(
    ensemble: &Ensemble,
    previous_input: &[f64],
    horizon: usize,
) -> Result<Vec<WeightVector>> {
    let w = weights_md(ensemble, previous_input)?;
    Ok(vec![w; horizon])
}

/// One step of LS history: the measured plant output and every expert's
/// prediction of it.
#[derive(Debug, Clone, PartialEq)]
pub struct LsRecord {
    pub measured: DVector<f64>,
    pub predictions: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsWeights {
    pub weights: WeightVector,
    /// Minimizer before simplex projection; `None` on the AV fallback.
    pub unprojected: Option<DVector<f64>>,
}

/// Least-squares fit of the combination weights over the last `window`
/// records, projected onto the probability simplex.
pub fn weights_ls(history: &[LsRecord], window: usize, n_experts: usize) -> Result<LsWeights> {
    if window == 0 || history.len() < window {
        warn!(
            "LS weighting: {} history records, window {window}; using uniform weights",
            history.len()
        );
        return Ok(LsWeights {
            weights: weights_av(n_experts)?,
            unprojected: None,
        });
    }
    let recent = &history[history.len() - window..];
    let mut gram = DMatrix::<f64>::zeros(n_experts, n_experts);
    let mut rhs = DVector::<f64>::zeros(n_experts);
    for rec in recent {
        check_dim("LS prediction count", n_experts, rec.predictions.len())?;
        for i in 0..n_experts {
            check_dim("LS prediction", rec.measured.len(), rec.predictions[i].len())?;
            rhs[i] += rec.predictions[i].dot(&rec.measured);
            for j in 0..=i {
                let g = rec.predictions[i].dot(&rec.predictions[j]);
                gram[(i, j)] += g;
                if i != j {
                    gram[(j, i)] += g;
                }
            }
        }
    }
    let ridge = LS_TIE_RIDGE * (gram.trace() / n_experts as f64).max(1.0);
    let uniform = 1.0 / n_experts as f64;
    for i in 0..n_experts {
        gram[(i, i)] += ridge;
        rhs[i] += ridge * uniform;
    }
    let solution = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Solver("LS weight normal equations are singular".into()))?;
    let projected = project_simplex(solution.as_slice())?;
    Ok(LsWeights {
        weights: WeightVector(projected),
        unprojected: Some(solution),
    })
}

/// Euclidean projection onto `{λ ≥ 0, Σλ = 1}` (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Result<DVector<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty vector".into()));
    }
    check_finite("simplex projection", v)?;
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    let mut out = DVector::from_iterator(v.len(), v.iter().map(|x| (x - theta).max(0.0)));
    // renormalize away rounding so the sum is 1 to machine precision
    let total = out.sum();
    out /= total;
    Ok(out)
}
