//! Model assembly, the mini-batch training loop and evaluation.

mod model;
mod optim;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mdn::{mixture_nll, split_theta, PointMode};
use crate::tensor::Tensor;

pub use model::{batch_inputs, LossKind, Model, ModelSpec, TargetScaler, Variant};
pub use optim::{clip_global_norm, global_norm, RmsProp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip threshold must be positive, got {}", self.clip)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "bad optimizer settings: lr {}, rho {}, epsilon {}",
                self.learning_rate, self.rho, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let d2 = g.square(d)?;
    g.mean(d2)
}

/// Per-epoch mean training loss, in standardized target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Loss of `model` on one batch, built on `g`.
fn batch_loss(g: &mut Graph, model: &Model, batch: &[&WindowedSample]) -> Result<(Var, Vec<Var>)> {
    let bound = model.params.bind(g);
    let x = g.constant(batch_inputs(batch)?);
    let out = model.forward(g, &bound, x)?;
    let targets: Vec<f64> = batch.iter().flat_map(|s| model.scaler.forward(s.target)).collect();
    let targets = Tensor::new(vec![batch.len(), 2], targets)?;
    let loss = match model.spec.variant.loss() {
        LossKind::Mse => mse_loss(g, out, &targets)?,
        LossKind::MixtureNll => mixture_nll(g, out, &targets)?,
    };
    Ok((loss, bound.vars().to_vec()))
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss(model: &Model, samples: &[WindowedSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let refs: Vec<&WindowedSample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let (loss, _) = batch_loss(&mut g, model, chunk)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Fits the target scaler on `samples`, then runs mini-batch RMSProp for
/// `cfg.epochs` epochs, reshuffling every epoch from the run seed.
pub fn train(model: &mut Model, samples: &[WindowedSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let targets: Vec<[f64; 2]> = samples.iter().map(|s| s.target).collect();
    model.scaler = TargetScaler::fit(&targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = RmsProp::new(cfg.learning_rate, cfg.rho, cfg.epsilon);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |source: Error| Error::Diverged {
                epoch,
                batch: bi,
                source: Box::new(source),
            };
            let batch: Vec<&WindowedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::new();
            let (loss, vars) = batch_loss(&mut g, model, &batch).map_err(|e| {
                if e.is_numerical() {
                    diverged(e)
                } else {
                    e
                }
            })?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(diverged(Error::NonFinite { op: "loss" }));
            }
            let mut grads = g.backward(loss).map_err(diverged)?;
            let mut gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            clip_global_norm(&mut gs, cfg.clip).map_err(diverged)?;
            opt.step(model.params.tensors_mut(), &gs).map_err(diverged)?;
            total += value * batch.len() as f64;
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(TrainReport { losses })
}

/// How point predictions are read from the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Mle,
    MixtureMean,
    /// One draw per sample from the predicted mixture.
    Sample,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(EvalMode::Sample),
            other => match other.parse::<PointMode>()? {
                PointMode::Mle => Ok(EvalMode::Mle),
                PointMode::MixtureMean => Ok(EvalMode::MixtureMean),
            },
        }
    }
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Mle => "mle",
            EvalMode::MixtureMean => "mixture-mean",
            EvalMode::Sample => "sample",
        }
    }
}

const EVAL_BATCH: usize = 256;

/// Point predictions in coordinate units. Regression heads ignore `mode`;
/// `seed` only matters for [`EvalMode::Sample`].
pub fn predict(model: &Model, samples: &[WindowedSample], mode: EvalMode, seed: u64) -> Result<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let refs: Vec<&WindowedSample> = samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(batch_inputs(chunk)?);
        let y = model.forward(&mut g, &bound, x)?;
        let y = g.value(y);
        for r in 0..chunk.len() {
            let row = y.row(r);
            let z = if model.spec.variant.has_mdn() {
                let p = split_theta(row)?;
                match mode {
                    EvalMode::Mle => p.predict(PointMode::Mle),
                    EvalMode::MixtureMean => p.predict(PointMode::MixtureMean),
                    EvalMode::Sample => p.sample(&mut rng),
                }
            } else {
                [row[0], row[1]]
            };
            out.push(model.scaler.inverse(z));
        }
    }
    Ok(out)
}

/// Root mean squared Euclidean distance between predictions and targets.
pub fn rmse(predictions: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            op: "rmse",
            lhs: vec![predictions.len(), 2],
            rhs: vec![targets.len(), 2],
        });
    }
    let sq: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

pub fn evaluate_rmse(model: &Model, samples: &[WindowedSample], mode: EvalMode, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = predict(model, samples, mode, seed)?;
    let targets: Vec<[f64; 2]> = samples.iter().map(|s| s.target).collect();
    rmse(&preds, &targets)
}
