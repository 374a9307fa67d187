//! Expert identification by truncated backpropagation through time.
//!
//! Training minimizes the mean squared error of the scaled outputs over
//! subsequences that each start from a zero state; the first `washout` steps
//! of every subsequence only warm the state up and are excluded from the
//! loss. Parameters are updated with Adam on clipped minibatch gradients and
//! the iterate with the lowest validation loss is returned.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::IoDataset;
use crate::error::{check_dim, Error, Result};
use crate::recmodel::{AffineScaler, GruModel, GruParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub subsequence: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub washout: usize,
    pub validation_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 8,
            subsequence: 120,
            batch_size: 8,
            epochs: 1000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            washout: 20,
            validation_fraction: 0.2,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size == 0 {
            return bad("hidden size must be at least 1");
        }
        if self.subsequence <= self.washout {
            return bad("subsequence must be longer than the washout");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 0.5]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Scaled-output MSE of an open-loop run over the training segment.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Entry 0 is the initialization, entry `e` the state after epoch `e`.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["epoch", "train_loss", "validation_loss"])
            .map_err(|e| Error::format(path, e))?;
        for r in &self.history {
            let val = r.validation_loss.map_or(String::new(), |v| v.to_string());
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), val])
                .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scalers fit to the data's ranges, seeded initialization, channel names
/// copied from the dataset.
pub fn init_expert(data: &IoDataset, hidden: usize, seed: u64) -> Result<GruModel> {
    let mut model = GruModel::init(
        hidden,
        AffineScaler::fit_min_max(&data.inputs)?,
        AffineScaler::fit_min_max(&data.outputs)?,
        seed,
    )?;
    model.set_channel_names(data.input_names.clone(), data.output_names.clone())?;
    Ok(model)
}

/// Initializes and trains one expert on `data`.
pub fn train_expert(data: &IoDataset, config: &TrainConfig) -> Result<(GruModel, TrainReport)> {
    config.validate()?;
    let model = init_expert(data, config.hidden_size, config.seed)?;
    train(&model, data, config)
}

/// Sequence scaled into flat buffers once so every rollout can reuse them.
struct Prepared {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    nu: usize,
    ny: usize,
}

impl Prepared {
    fn new(model: &GruModel, data: &IoDataset, range: std::ops::Range<usize>) -> Self {
        let (nu, ny) = (model.input_size(), model.output_size());
        let mut inputs = Vec::with_capacity(range.len() * nu);
        let mut targets = vec![0.0; range.len() * ny];
        for (i, k) in range.enumerate() {
            inputs.extend_from_slice(data.inputs[k].as_slice());
            model
                .output_scaler()
                .scale_into(data.outputs[k].as_slice(), &mut targets[i * ny..(i + 1) * ny]);
        }
        Self {
            inputs,
            targets,
            nu,
            ny,
        }
    }

    fn len(&self) -> usize {
        self.inputs.len() / self.nu
    }
}

/// Loss (and optionally its parameter gradient) of one zero-state rollout
/// over steps `start..start+len` of `seq`.
fn sequence_loss(
    model: &GruModel,
    seq: &Prepared,
    start: usize,
    len: usize,
    washout: usize,
    grads: Option<&mut GruParams>,
) -> f64 {
    let (nu, ny) = (seq.nu, seq.ny);
    let x0 = vec![0.0; model.hidden_size()];
    let tape = model.forward_flat(&x0, &seq.inputs[start * nu..(start + len) * nu], None);
    let count = ((len - washout) * ny) as f64;
    let mut loss = 0.0;
    let mut adj = vec![0.0; len * ny];
    let gain = model.output_scaler().gain();
    for k in washout..len {
        let pred = tape.scaled_output(k);
        let target = &seq.targets[(start + k) * ny..(start + k + 1) * ny];
        for j in 0..ny {
            let e = pred[j] - target[j];
            loss += e * e;
            // backward_flat expects physical-unit adjoints and rescales by the gain
            adj[k * ny + j] = 2.0 * e / (count * gain[j]);
        }
    }
    if let Some(g) = grads {
        model.backward_flat(&tape, &adj, None, Some(g));
    }
    loss / count
}

pub fn train(model: &GruModel, data: &IoDataset, config: &TrainConfig) -> Result<(GruModel, TrainReport)> {
    config.validate()?;
    check_dim("training inputs", model.input_size(), data.input_size())?;
    check_dim("training outputs", model.output_size(), data.output_size())?;
    let n = data.len();
    if n < 2 * config.subsequence {
        return Err(Error::InvalidInput(format!(
            "training needs at least {} samples, dataset has {n}",
            2 * config.subsequence
        )));
    }
    let n_val = (config.validation_fraction * n as f64).round() as usize;
    let n_val = if n_val > config.washout { n_val } else { 0 };
    let n_train = n - n_val;
    if n_train < config.subsequence {
        return Err(Error::InvalidInput("training segment shorter than one subsequence".into()));
    }
    let train_seq = Prepared::new(model, data, 0..n_train);
    let val_seq = (n_val > 0).then(|| Prepared::new(model, data, n_train..n));

    let evaluate = |m: &GruModel, epoch: usize| -> Result<EpochRecord> {
        let train_loss = sequence_loss(m, &train_seq, 0, train_seq.len(), config.washout, None);
        let validation_loss = val_seq
            .as_ref()
            .map(|v| sequence_loss(m, v, 0, v.len(), config.washout, None));
        if !train_loss.is_finite() || validation_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        Ok(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        })
    };
    let score = |r: &EpochRecord| r.validation_loss.unwrap_or(r.train_loss);

    let mut current = model.clone();
    let mut history = vec![evaluate(&current, 0)?];
    let mut best = (score(&history[0]), 0, current.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = current.params().clone();
    let n_params = params.num_params();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut t = 0i32;
    let stride = config.subsequence - config.washout;
    let len = config.subsequence;

    for epoch in 1..=config.epochs {
        let offset = rng.random_range(0..stride);
        let mut starts: Vec<usize> = (offset..=n_train - len).step_by(stride).collect();
        if starts.is_empty() {
            starts.push(0);
        }
        starts.shuffle(&mut rng);
        for batch in starts.chunks(config.batch_size) {
            // per-sequence gradients in parallel, reduced in batch order
            let parts: Vec<(f64, GruParams)> = batch
                .par_iter()
                .map(|&s| {
                    let mut g = GruParams::zeros(
                        current.hidden_size(),
                        current.input_size(),
                        current.output_size(),
                    );
                    let l = sequence_loss(&current, &train_seq, s, len, config.washout, Some(&mut g));
                    (l, g)
                })
                .collect();
            let mut grad = vec![0.0; n_params];
            for (l, g) in &parts {
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                for (acc, v) in grad.iter_mut().zip(g.to_flat()) {
                    *acc += v / batch.len() as f64;
                }
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if norm > config.grad_clip {
                grad.iter_mut().for_each(|g| *g *= config.grad_clip / norm);
            }
            t += 1;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            let mut flat = params.to_flat();
            for i in 0..n_params {
                m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * grad[i];
                m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * grad[i] * grad[i];
                flat[i] -= config.learning_rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + 1e-8);
            }
            params.set_flat(&flat);
            current = current.with_params(params.clone())?;
        }
        let record = evaluate(&current, epoch)?;
        let s = score(&record);
        history.push(record);
        if s < best.0 {
            best = (s, epoch, current.clone());
        }
    }
    Ok((
        best.2,
        TrainReport {
            history,
            best_epoch: best.1,
        },
    ))
}

/// Open-loop identification metrics per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Physical units.
    pub rmse: Vec<f64>,
    /// `100 (1 − ‖y − ŷ‖ / ‖y − ȳ‖)`.
    pub fit: Vec<f64>,
    /// RMSE over all channels in the model's scaled output units.
    pub scaled_rmse: f64,
}

/// Simulates `model` from a zero state over the whole dataset and scores the
/// steps after `washout`.
pub fn evaluate_fit(model: &GruModel, data: &IoDataset, washout: usize) -> Result<FitReport> {
    check_dim("evaluation inputs", model.input_size(), data.input_size())?;
    check_dim("evaluation outputs", model.output_size(), data.output_size())?;
    if data.len() <= washout {
        return Err(Error::InvalidInput(format!(
            "evaluation needs more than {washout} samples, dataset has {}",
            data.len()
        )));
    }
    let pred = model.simulate(&vec![0.0; model.hidden_size()], &data.inputs)?;
    let ny = model.output_size();
    let scored = &data.outputs[washout..];
    let pred = &pred[washout..];
    let m = scored.len() as f64;
    let mean: DVector<f64> = scored.iter().fold(DVector::zeros(ny), |a, y| a + y) / m;
    let gain = model.output_scaler().gain();
    let mut rmse = Vec::with_capacity(ny);
    let mut fit = Vec::with_capacity(ny);
    let mut scaled_sq = 0.0;
    for j in 0..ny {
        let err: f64 = scored.iter().zip(pred).map(|(y, p)| (y[j] - p[j]).powi(2)).sum();
        let spread: f64 = scored.iter().map(|y| (y[j] - mean[j]).powi(2)).sum();
        rmse.push((err / m).sqrt());
        scaled_sq += err / (gain[j] * gain[j]);
        fit.push(if spread > 0.0 {
            100.0 * (1.0 - (err / spread).sqrt())
        } else if err == 0.0 {
            100.0
        } else {
            f64::NEG_INFINITY
        });
    }
    Ok(FitReport {
        rmse,
        fit,
        scaled_rmse: (scaled_sq / (m * ny as f64)).sqrt(),
    })
}
