//! Recognition rates, confusion-derived rates, ROC/AUC and aggregation of
//! patch predictions into image decisions.

pub mod aggregate;
pub mod metrics;
pub mod report;
pub mod roc;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, mean_aggregate, wta_aggregate, Aggregation};
pub use metrics::{
    confusion_and_rates, global_patient_rate, image_level_rate, patient_score, patient_table, Averaging, Confusion,
    PatientRow, Rates,
};
pub use report::{evaluate, evaluate_predictions, EvalOptions, EvalReport, Level};
pub use roc::{auc_mann_whitney, macro_auc, roc_auc, roc_curve, RocAuc, RocPoint};

use crate::error::{Error, Result};

/// Prediction for one sample: an image, a patch, or an aggregated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample: String,
    pub parent: String,
    pub patient: String,
    pub truth: usize,
    /// The argmax of `probs` for model outputs; the vote winner after
    /// winner-take-all aggregation.
    pub pred: usize,
    pub probs: Vec<f64>,
}

/// Largest tolerated deviation of a probability row sum from one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

impl PredictionRecord {
    /// A model prediction; `pred` is the argmax of `probs`.
    pub fn from_probs(sample: String, parent: String, patient: String, truth: usize, probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE || probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Metric(format!("{sample}: probabilities sum to {sum}")));
        }
        if truth >= probs.len() {
            return Err(Error::Metric(format!("{sample}: label {truth} outside {} classes", probs.len())));
        }
        Ok(Self {
            pred: crate::train::argmax(&probs),
            sample,
            parent,
            patient,
            truth,
            probs,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.truth == self.pred
    }
}
