//! RMSE and the asymmetric score over last-window test predictions.

use std::fmt::Write as _;

use crate::dataset::{batch_tensors, WindowSample};
use crate::error::{Error, Result};
use crate::model::Model;

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub unit_id: u32,
    /// Capped ground-truth RUL.
    pub true_rul: f64,
    pub predicted_rul: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn from_pairs(truth: &[f64], predicted: &[f64]) -> Self {
        Self {
            entries: truth
                .iter()
                .zip(predicted)
                .enumerate()
                .map(|(i, (&t, &p))| Prediction {
                    unit_id: i as u32 + 1,
                    true_rul: t,
                    predicted_rul: p,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `unit_id,true_rul,predicted_rul` with full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit_id,true_rul,predicted_rul\n");
        for p in &self.entries {
            writeln!(out, "{},{:?},{:?}", p.unit_id, p.true_rul, p.predicted_rul)
                .expect("write to string");
        }
        out
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Usage("metrics need at least one prediction".into()))
        } else {
            Ok(())
        }
    }
}

pub fn rmse(preds: &PredictionSet) -> Result<f64> {
    preds.non_empty()?;
    let sq: f64 = preds
        .entries
        .iter()
        .map(|p| (p.true_rul - p.predicted_rul).powi(2))
        .sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Penalty for one prediction: early errors decay with 13, late with 10.
pub fn unit_score(true_rul: f64, predicted_rul: f64) -> f64 {
    let d = predicted_rul - true_rul;
    if d < 0.0 {
        (-d / 13.0).exp_m1()
    } else {
        (d / 10.0).exp_m1()
    }
}

pub fn score(preds: &PredictionSet) -> Result<f64> {
    preds.non_empty()?;
    Ok(preds
        .entries
        .iter()
        .map(|p| unit_score(p.true_rul, p.predicted_rul))
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: PredictionSet,
    pub rmse: f64,
    pub score: f64,
}

impl Evaluation {
    pub fn from_predictions(predictions: PredictionSet) -> Result<Self> {
        Ok(Self {
            rmse: rmse(&predictions)?,
            score: score(&predictions)?,
            predictions,
        })
    }
}

/// Runs the model in evaluation mode on one window per test unit and scores
/// the predictions after clamping them to `[0, r_max]`.
pub fn evaluate(model: &Model, test: &[WindowSample], r_max: f64) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Usage("empty test set".into()));
    }
    let mut entries = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (x, _) = batch_tensors(&refs)?;
        let y = model.predict(&x)?;
        entries.extend(chunk.iter().zip(y).map(|(s, p)| Prediction {
            unit_id: s.unit_id,
            true_rul: s.label,
            predicted_rul: p.clamp(0.0, r_max),
        }));
    }
    Evaluation::from_predictions(PredictionSet { entries })
}
