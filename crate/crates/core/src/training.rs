//! Adam mini-batch training and multi-trial runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_tensors, WindowSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, PredictionSet};
use crate::graph::AdjacencyMatrix;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trials: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Trial `t` uses `seed + t` for initialization, shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 100,
            epochs: 100,
            trials: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.trials == 0 {
            return bad("batch_size, epochs and trials must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// First and second moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    /// Number of steps taken so far.
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn mse(tape: &mut Tape, pred: Var, labels: Tensor) -> Result<Var> {
    let y = tape.constant(labels);
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean squared error of evaluation-mode predictions.
pub fn mean_loss(model: &Model, windows: &[WindowSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Usage("no windows".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(256) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let p = model.predict(&x)?;
        total += p.iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / windows.len() as f64)
}

/// Trains `model` in place and returns the mean batch loss of every epoch.
///
/// Windows are reshuffled every epoch with a generator derived from
/// `(seed, epoch)`; dropout draws from its own stream derived from `seed`.
/// `trial` only labels divergence errors.
pub fn train(
    model: &mut Model,
    windows: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
    trial: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Usage("no training windows".into()));
    }
    let mut dropout_rng = seeding::rng_for(seed, "dropout");
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeding::rng_for(seed, &format!("shuffle/{epoch}")));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &windows[i]).collect();
            let (x, y) = batch_tensors(&refs)?;
            tape.reset();
            let diverged = |e: Error| match e {
                Error::NonFinite(what) => Error::Diverged {
                    trial,
                    epoch,
                    msg: format!("non-finite value produced by {what}"),
                },
                other => other,
            };
            let out = model.forward(&mut tape, &x, true, &mut dropout_rng).map_err(diverged)?;
            let loss = mse(&mut tape, out.prediction, y).map_err(diverged)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    trial,
                    epoch,
                    msg: format!("loss became {value}"),
                });
            }
            tape.backward(loss).map_err(diverged)?;
            let mut grads = BTreeMap::new();
            for (name, &var) in &out.params {
                if let Some(g) = tape.grad(var) {
                    if !g.is_finite() {
                        return Err(Error::Diverged {
                            trial,
                            epoch,
                            msg: format!("non-finite gradient for {name}"),
                        });
                    }
                    grads.insert(name.clone(), g);
                }
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("trial {trial} epoch {epoch}: loss {mean}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Training and test windows for one experiment.
#[derive(Clone, Copy, Debug)]
pub struct DataBundle<'a> {
    pub train: &'a [WindowSample],
    pub test: &'a [WindowSample],
    pub r_max: f64,
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub rmse: f64,
    pub score: f64,
    pub predictions: PredictionSet,
    pub wall_clock: Duration,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trials: Vec<TrialResult>,
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TrainReport {
    pub fn rmse(&self) -> (f64, f64) {
        mean_std(&self.trials.iter().map(|t| t.rmse).collect::<Vec<_>>())
    }

    pub fn score(&self) -> (f64, f64) {
        mean_std(&self.trials.iter().map(|t| t.score).collect::<Vec<_>>())
    }

    /// Per-epoch losses, per-trial metrics and the aggregate rows. Wall-clock
    /// times are excluded so reruns produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,epoch,loss,rmse,score\n");
        let w = |out: &mut String, line: std::fmt::Arguments<'_>| {
            out.write_fmt(line).expect("write to string");
            out.push('\n');
        };
        for t in &self.trials {
            for (e, loss) in t.epoch_losses.iter().enumerate() {
                w(&mut out, format_args!("{},{},{:?},,", t.trial, e + 1, loss));
            }
            w(&mut out, format_args!("{},final,,{:?},{:?}", t.trial, t.rmse, t.score));
        }
        let (rm, rs) = self.rmse();
        let (sm, ss) = self.score();
        w(&mut out, format_args!("mean,,,{rm:?},{sm:?}"));
        w(&mut out, format_args!("std,,,{rs:?},{ss:?}"));
        out
    }
}

fn run_one(
    data: DataBundle<'_>,
    model_cfg: &ModelConfig,
    adjacency: Option<&AdjacencyMatrix>,
    cfg: &TrainConfig,
    trial: usize,
) -> Result<(TrialResult, Model)> {
    let start = Instant::now();
    let seed = cfg.seed + trial as u64;
    let mut model = Model::assemble(
        ModelConfig {
            seed,
            ..model_cfg.clone()
        },
        adjacency.cloned(),
    )?;
    let epoch_losses = train(&mut model, data.train, cfg, seed, trial)?;
    let eval = evaluate(&model, data.test, data.r_max)?;
    let result = TrialResult {
        trial,
        seed,
        epoch_losses,
        rmse: eval.rmse,
        score: eval.score,
        predictions: eval.predictions,
        wall_clock: start.elapsed(),
    };
    log::info!(
        "trial {trial}: rmse {:.4} score {:.4} in {:.2?}",
        result.rmse,
        result.score,
        result.wall_clock
    );
    Ok((result, model))
}

/// Runs `cfg.trials` independent trials and returns the report together with
/// the trained models in trial order.
///
/// With `parallel` set, trials run on separate threads; each trial is
/// self-contained, so the results are the same either way.
pub fn run_trials(
    data: DataBundle<'_>,
    model_cfg: &ModelConfig,
    adjacency: Option<&AdjacencyMatrix>,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(TrainReport, Vec<Model>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    let outcomes: Vec<Result<(TrialResult, Model)>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..cfg.trials)
                .map(|t| s.spawn(move || run_one(data, model_cfg, adjacency, cfg, t)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial thread panicked"))
                .collect()
        })
    } else {
        (0..cfg.trials)
            .map(|t| run_one(data, model_cfg, adjacency, cfg, t))
            .collect()
    };
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut models = Vec::with_capacity(cfg.trials);
    for o in outcomes {
        let (r, m) = o?;
        trials.push(r);
        models.push(m);
    }
    Ok((TrainReport { trials }, models))
}
