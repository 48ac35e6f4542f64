//! Prediction on raw inputs and holdout metrics.

use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Prediction, TaskKind};

/// Predictions for raw feature rows. Rows are standardized with `record`
/// first and regression outputs are mapped back to the raw target scale.
/// Only features are taken, so targets cannot leak into predictions.
pub fn predict_rows(model: &ModelParams, record: Option<&Standardization>, x: &[f64], dim: usize) -> Result<Vec<Prediction>> {
    if dim != model.dim() || x.len() % dim != 0 {
        return Err(Error::contract(format!("rows have {dim} features, the model expects {}", model.dim())));
    }
    let mut row = vec![0.0; dim];
    x.chunks_exact(dim)
        .map(|raw| {
            row.copy_from_slice(raw);
            if let Some(r) = record {
                r.apply_row(&mut row);
            }
            let mut p = model.predict(&row)?;
            if let (Some(r), TaskKind::Regression) = (record, model.task) {
                p.value = r.inverse_target(p.value);
            }
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub task: TaskKind,
    /// RMSE for regression, 0-1 error for classification.
    pub error: f64,
    /// Samples routed to each expert slot.
    pub assignments: Vec<usize>,
    pub samples: usize,
}

pub fn rmse(predicted: impl IntoIterator<Item = f64>, actual: &[f64]) -> f64 {
    let sse: f64 = predicted.into_iter().zip(actual).map(|(p, y)| (p - y) * (p - y)).sum();
    (sse / actual.len() as f64).sqrt()
}

pub fn zero_one_error(predicted: impl IntoIterator<Item = f64>, actual: &[f64]) -> f64 {
    let wrong = predicted.into_iter().zip(actual).filter(|(p, y)| p != *y).count();
    wrong as f64 / actual.len() as f64
}

/// Scores `model` on `data`, whose rows and targets are on the raw scale
/// described by `record`.
pub fn evaluate(model: &ModelParams, record: Option<&Standardization>, data: &Dataset) -> Result<Evaluation> {
    if data.task != model.task {
        return Err(Error::contract(format!(
            "model is for {}, data is for {}",
            model.task.as_str(),
            data.task.as_str()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_rows(model, record, &data.x, data.dim)?;
    let mut assignments = vec![0; model.n_experts()];
    for p in &preds {
        assignments[p.expert] += 1;
    }
    let labels = preds.iter().map(Prediction::label);
    let error = match model.task {
        TaskKind::Regression => rmse(labels, &data.y),
        TaskKind::Classification => zero_one_error(labels, &data.y),
    };
    Ok(Evaluation { task: model.task, error, assignments, samples: data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standardization_of, synth_generate};
    use crate::model::{ExpertParams, TreeTopology};
    use crate::SyntheticSpec;

    #[test]
    fn generator_model_reaches_the_noise_floor() {
        let spec = SyntheticSpec { depth: 2, experts: 3, dim: 6, n: 40_000, nonzero: (2, 4), seed: 3, ..Default::default() };
        let (data, truth) = synth_generate(&spec).unwrap();
        let ev = evaluate(&truth, None, &data).unwrap();
        assert!((ev.error - 0.1f64.sqrt()).abs() < 0.005, "rmse {}", ev.error);
        assert_eq!(ev.assignments.iter().sum::<usize>(), data.len());
    }

    #[test]
    fn mean_predictor_has_unit_rmse_on_standardized_targets() {
        let spec = SyntheticSpec { depth: 1, experts: 2, dim: 3, n: 5000, nonzero: (1, 2), seed: 1, ..Default::default() };
        let (raw, _) = synth_generate(&spec).unwrap();
        let record = standardization_of(&raw).unwrap();
        let z = raw.apply_standardization(&record);
        let topo = TreeTopology::complete(1).unwrap();
        let gate = crate::GateParams { gamma: 0, threshold: 0.0, g: 0.5 };
        let model = ModelParams::new(TaskKind::Regression, 1.0, topo, vec![gate], vec![ExpertParams::constant(3, 0.0, 1.0); 2]).unwrap();
        let ev = evaluate(&model, None, &z).unwrap();
        assert!((ev.error - 1.0).abs() < 1e-9);
        // The same model applied to raw inputs through the record predicts the raw mean.
        let raw_ev = evaluate(&model, Some(&record), &raw).unwrap();
        assert!((raw_ev.error - record.target_scale).abs() < 1e-9);
    }

    #[test]
    fn constant_classifier_errs_on_the_negative_labels() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![1.0, -1.0, 1.0, -1.0, -1.0];
        let data = Dataset::new(x, y, 1, TaskKind::Classification).unwrap();
        let topo = TreeTopology::complete(1).unwrap();
        let gate = crate::GateParams { gamma: 0, threshold: 2.0, g: 0.9 };
        let model = ModelParams::new(TaskKind::Classification, 1.0, topo, vec![gate], vec![ExpertParams::constant(1, 0.7, 1.0); 2]).unwrap();
        let ev = evaluate(&model, None, &data).unwrap();
        assert!((ev.error - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let data = Dataset::new(vec![0.0, 1.0], vec![1.0, -1.0], 1, TaskKind::Classification).unwrap();
        let topo = TreeTopology::complete(1).unwrap();
        let gate = crate::GateParams { gamma: 0, threshold: 0.5, g: 0.9 };
        let model = ModelParams::new(TaskKind::Regression, 1.0, topo, vec![gate], vec![ExpertParams::constant(1, 0.0, 1.0); 2]).unwrap();
        assert!(evaluate(&model, None, &data).is_err());
        assert!(predict_rows(&model, None, &[0.0, 1.0], 2).is_err());
    }
}
