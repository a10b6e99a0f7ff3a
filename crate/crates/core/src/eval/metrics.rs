use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::error::{Error, Result};

/// Fraction of a patient's images that were classified correctly.
pub fn patient_score(correct: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Metric("patient score of a patient with no images".into()));
    }
    if correct > total {
        return Err(Error::Metric(format!("{correct} correct out of {total} images")));
    }
    Ok(correct as f64 / total as f64)
}

/// Mean of per-patient scores.
pub fn global_patient_rate(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Metric("patient recognition rate over zero patients".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Correctly classified records over all records, ignoring patients.
pub fn image_level_rate(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("image recognition rate over zero records".into()));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub images: usize,
    pub correct: usize,
    pub score: f64,
}

/// One row per distinct non-empty patient id, sorted by id. Records without a
/// patient id are skipped.
pub fn patient_table(records: &[PredictionRecord]) -> Result<Vec<PatientRow>> {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.patient.is_empty()) {
        let e = tally.entry(r.patient.as_str()).or_default();
        e.0 += 1;
        e.1 += r.is_correct() as usize;
    }
    tally
        .into_iter()
        .map(|(id, (images, correct))| {
            Ok(PatientRow {
                patient_id: id.to_string(),
                images,
                correct,
                score: patient_score(correct, images)?,
            })
        })
        .collect()
}

/// `matrix[truth][pred]` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(records: &[PredictionRecord], classes: usize) -> Result<Self> {
        let mut matrix = vec![vec![0; classes]; classes];
        for r in records {
            if r.truth >= classes || r.pred >= classes {
                return Err(Error::Metric(format!("{}: label outside the {classes}-class vocabulary", r.sample)));
            }
            matrix[r.truth][r.pred] += 1;
        }
        Ok(Self { matrix })
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum()
    }

    /// True positives, false negatives, false positives and true negatives
    /// with `class` as the positive class.
    pub fn one_vs_rest(&self, class: usize) -> (usize, usize, usize, usize) {
        let k = self.matrix.len();
        let tp = self.matrix[class][class];
        let fn_ = (0..k).filter(|&j| j != class).map(|j| self.matrix[class][j]).sum();
        let fp = (0..k).filter(|&i| i != class).map(|i| self.matrix[i][class]).sum();
        let tn = self.total() - tp - fn_ - fp;
        (tp, fn_, fp, tn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Sensitivity and specificity of one positive class against the rest.
    Binary { positive: usize },
    /// Unweighted mean of one-vs-rest rates over classes present in the truth.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    /// `None` when undefined (no positives, or no class present).
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Classes left out of a macro mean because they never occur in the truth.
    pub excluded: Vec<usize>,
    pub warnings: Vec<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_and_rates(records: &[PredictionRecord], classes: usize, averaging: Averaging) -> Result<(Confusion, Rates)> {
    if records.is_empty() {
        return Err(Error::Metric("rates over zero records".into()));
    }
    let cm = Confusion::new(records, classes)?;
    let accuracy = cm.trace() as f64 / cm.total() as f64;
    let mut warnings = Vec::new();
    let mut excluded = Vec::new();
    let (sensitivity, specificity) = match averaging {
        Averaging::Binary { positive } => {
            if positive >= classes {
                return Err(Error::Metric(format!("positive class {positive} outside the vocabulary")));
            }
            let (tp, fn_, fp, tn) = cm.one_vs_rest(positive);
            let sens = ratio(tp, tp + fn_);
            let spec = ratio(tn, tn + fp);
            if sens.is_none() {
                warnings.push("no positive records: sensitivity is undefined".into());
            }
            if spec.is_none() {
                warnings.push("no negative records: specificity is undefined".into());
            }
            (sens, spec)
        }
        Averaging::Macro => {
            let mut sens = Vec::new();
            let mut spec = Vec::new();
            for c in 0..classes {
                let (tp, fn_, fp, tn) = cm.one_vs_rest(c);
                if tp + fn_ == 0 {
                    excluded.push(c);
                    warnings.push(format!("class {c} does not occur in the truth and is left out of the macro mean"));
                    continue;
                }
                sens.push(tp as f64 / (tp + fn_) as f64);
                if let Some(s) = ratio(tn, tn + fp) {
                    spec.push(s);
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            (mean(&sens), mean(&spec))
        }
    };
    Ok((
        cm,
        Rates {
            accuracy,
            sensitivity,
            specificity,
            excluded,
            warnings,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(truth: usize, pred: usize, patient: &str) -> PredictionRecord {
        let mut probs = vec![0.0; 4];
        probs[pred] = 1.0;
        PredictionRecord {
            sample: format!("{patient}-{truth}-{pred}"),
            parent: String::new(),
            patient: patient.into(),
            truth,
            pred,
            probs,
        }
    }

    #[test]
    fn patient_scores() {
        assert_eq!(patient_score(10, 10).unwrap(), 1.0);
        assert_eq!(patient_score(9, 10).unwrap(), 0.9);
        assert_eq!(patient_score(0, 7).unwrap(), 0.0);
        assert!(patient_score(0, 0).is_err());
        assert_eq!(global_patient_rate(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(global_patient_rate(&[]).is_err());
    }

    #[test]
    fn binary_extremes() {
        let perfect: Vec<_> = [(0, 0), (1, 1), (1, 1)].iter().map(|&(t, p)| rec(t, p, "a")).collect();
        let (_, r) = confusion_and_rates(&perfect, 2, Averaging::Binary { positive: 1 }).unwrap();
        assert_eq!((r.accuracy, r.sensitivity, r.specificity), (1.0, Some(1.0), Some(1.0)));
        let all_pos: Vec<_> = [(0, 1), (1, 1), (0, 1)].iter().map(|&(t, p)| rec(t, p, "a")).collect();
        let (_, r) = confusion_and_rates(&all_pos, 2, Averaging::Binary { positive: 1 }).unwrap();
        assert_eq!((r.sensitivity, r.specificity), (Some(1.0), Some(0.0)));
    }

    #[test]
    fn macro_excludes_absent_classes() {
        let rs: Vec<_> = [(0, 0), (0, 1), (1, 1), (2, 1)].iter().map(|&(t, p)| rec(t, p, "a")).collect();
        let (cm, r) = confusion_and_rates(&rs, 4, Averaging::Macro).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(r.excluded, vec![3]);
        assert_eq!(r.warnings.len(), 1);
        // Sensitivities 0.5, 1, 0; specificities 1, 1/3, 1.
        assert!((r.sensitivity.unwrap() - 0.5).abs() < 1e-15);
        assert!((r.specificity.unwrap() - 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn patient_table_sorted_and_scored() {
        let rs = vec![rec(0, 0, "b"), rec(0, 1, "b"), rec(1, 1, "a"), rec(1, 1, "")];
        let t = patient_table(&rs).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].patient_id.as_str(), t[0].score), ("a", 1.0));
        assert_eq!((t[1].images, t[1].correct), (2, 1));
    }
}
