use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Every record is scored on its own.
    #[default]
    None,
    /// Plurality vote of patch labels per parent image.
    Wta,
    /// Argmax of the mean patch probabilities per parent image.
    Mean,
}

fn check_group(group: &[PredictionRecord]) -> Result<(usize, usize)> {
    let first = group
        .first()
        .ok_or_else(|| Error::Metric("cannot aggregate an empty group".into()))?;
    let k = first.probs.len();
    for r in group {
        if r.truth != first.truth || r.patient != first.patient || r.probs.len() != k {
            return Err(Error::Metric(format!(
                "records of parent {} disagree on label, patient or class count",
                first.parent
            )));
        }
    }
    Ok((first.truth, k))
}

fn mean_probs(group: &[PredictionRecord], k: usize) -> Vec<f64> {
    let mut mean = vec![0.0; k];
    for r in group {
        for (m, p) in mean.iter_mut().zip(&r.probs) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= group.len() as f64);
    mean
}

fn image_record(group: &[PredictionRecord], pred: usize, probs: Vec<f64>) -> PredictionRecord {
    let first = &group[0];
    PredictionRecord {
        sample: first.parent.clone(),
        parent: first.parent.clone(),
        patient: first.patient.clone(),
        truth: first.truth,
        pred,
        probs,
    }
}

/// Winner-take-all: the image label is the class nominated by most patches.
/// Ties go to the larger summed probability, then to the lower class index.
/// The probability vector is the mean of the patch vectors.
pub fn wta_aggregate(group: &[PredictionRecord]) -> Result<PredictionRecord> {
    let (_, k) = check_group(group)?;
    let mut votes = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for r in group {
        votes[r.pred] += 1;
        for (m, p) in mass.iter_mut().zip(&r.probs) {
            *m += p;
        }
    }
    let mut best = 0;
    for c in 1..k {
        if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    Ok(image_record(group, best, mean_probs(group, k)))
}

/// Mean aggregation: the label is the argmax of the mean probability vector.
pub fn mean_aggregate(group: &[PredictionRecord]) -> Result<PredictionRecord> {
    let (_, k) = check_group(group)?;
    let probs = mean_probs(group, k);
    let pred = crate::train::argmax(&probs);
    Ok(image_record(group, pred, probs))
}

/// Groups records by parent (in parent order) and aggregates each group.
pub fn aggregate(records: &[PredictionRecord], how: Aggregation) -> Result<Vec<PredictionRecord>> {
    let reduce = match how {
        Aggregation::None => return Ok(records.to_vec()),
        Aggregation::Wta => wta_aggregate,
        Aggregation::Mean => mean_aggregate,
    };
    let mut groups: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.parent.as_str()).or_default().push(r.clone());
    }
    groups.values().map(|g| reduce(g)).collect()
}
