//! Generalization accuracy of local models on the held-out test split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ClassId;
use crate::modelzoo::LocalModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    pub mean: f64,
    /// Accuracy per true class, averaged over clients; `None` for classes
    /// absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

const CHUNK: usize = 256;

/// Top-1 predictions of `model` over a `[n, ...]` image tensor.
pub fn predict_all<T: Scalar>(model: &LocalModel<T>, images: &Tensor<T>) -> Result<Vec<ClassId>> {
    let shape = images.sample_shape().to_vec();
    let mut out = Vec::with_capacity(images.batch());
    for start in (0..images.batch()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.batch());
        let batch = Tensor::stack(&shape, (start..end).map(|i| images.sample(i)))?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

/// Fraction of matching predictions, in percent, per true class.
fn class_hits(pred: &[ClassId], labels: &[ClassId], classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        tot[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let all = 100.0 * hit.iter().sum::<usize>() as f64 / labels.len() as f64;
    let per = hit
        .iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect();
    (all, per)
}

/// Top-1 accuracy of every model on the full test set, plus the mean over
/// models and a per-class breakdown.
pub fn evaluate_generalization<T: Scalar>(
    models: &[&LocalModel<T>],
    images: &Tensor<T>,
    labels: &[ClassId],
) -> Result<Evaluation> {
    if labels.is_empty() || images.batch() != labels.len() {
        return Err(Error::invalid(format!(
            "test set has {} images and {} labels",
            images.batch(),
            labels.len()
        )));
    }
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    let classes = models[0].classes;
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("test label {y} outside 0..{classes}")));
    }
    let results = models
        .par_iter()
        .map(|m| Ok(class_hits(&predict_all(m, images)?, labels, classes)))
        .collect::<Result<Vec<_>>>()?;
    let per_client: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
    let per_class = (0..classes)
        .map(|y| {
            results[0].1[y].map(|_| results.iter().map(|r| r.1[y].unwrap_or(0.0)).sum::<f64>() / results.len() as f64)
        })
        .collect();
    Ok(Evaluation {
        per_client,
        mean,
        per_class,
    })
}
