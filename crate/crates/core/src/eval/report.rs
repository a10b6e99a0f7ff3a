use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, Aggregation};
use super::metrics::{confusion_and_rates, global_patient_rate, image_level_rate, patient_table, Averaging, PatientRow};
use super::roc::{auc_mann_whitney, roc_curve, RocPoint};
use super::PredictionRecord;
use crate::checkpoint::Checkpoint;
use crate::data::{ImageDataset, Magnification, Manifest, Split};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::train::predict_probs;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Headline rate is the image-level recognition rate.
    #[default]
    Image,
    /// Headline rate is the mean of per-patient scores.
    Patient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub level: Level,
    pub aggregation: Aggregation,
    /// Only records at this magnification.
    pub magnification: Option<Magnification>,
    /// Only records in this split; `None` evaluates every record.
    pub split: Option<Split>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            level: Level::Image,
            aggregation: Aggregation::None,
            magnification: None,
            split: Some(Split::Test),
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: String,
    pub auc: Option<f64>,
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub options: EvalOptions,
    pub vocabulary: Vec<String>,
    /// Records before aggregation.
    pub input_records: usize,
    /// Records scored, after aggregation.
    pub records: usize,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Binary: AUC of the positive class (index 1). Otherwise the macro
    /// one-vs-rest mean.
    pub auc: Option<f64>,
    /// One-vs-rest curves: only the positive class for binary problems.
    pub roc: Vec<ClassRoc>,
    pub patients: Vec<PatientRow>,
    pub patient_rate: Option<f64>,
    pub image_rate: f64,
    /// `image_rate` or `patient_rate`, according to the level.
    pub headline: Option<f64>,
    pub warnings: Vec<String>,
    /// The resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
}

/// Aggregates `records` as requested and computes every metric.
pub fn evaluate_predictions(
    records: &[PredictionRecord],
    vocabulary: &[String],
    options: &EvalOptions,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let k = vocabulary.len();
    if k < 2 {
        return Err(Error::Metric("evaluation needs at least two classes".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.sample.cmp(&b.sample));
    let scored = aggregate(&sorted, options.aggregation)?;
    let averaging = if k == 2 {
        Averaging::Binary { positive: 1 }
    } else {
        Averaging::Macro
    };
    let (cm, rates) = confusion_and_rates(&scored, k, averaging)?;
    let mut warnings = rates.warnings.clone();

    let truth: Vec<usize> = scored.iter().map(|r| r.truth).collect();
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut roc = Vec::new();
    for &c in &classes {
        let scores: Vec<f64> = scored.iter().map(|r| r.probs[c]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let (auc, points) = match (auc_mann_whitney(&scores, &labels), roc_curve(&scores, &labels)) {
            (Ok(a), Ok(p)) => (Some(a), p),
            _ => {
                warnings.push(format!("AUC for class {} is undefined: it is absent from, or all of, the truth", vocabulary[c]));
                (None, Vec::new())
            }
        };
        roc.push(ClassRoc {
            class: vocabulary[c].clone(),
            auc,
            points,
        });
    }
    let defined: Vec<f64> = roc.iter().filter_map(|r| r.auc).collect();
    let auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    let patients = patient_table(&scored)?;
    let patient_rate = if patients.is_empty() {
        warnings.push("no patient ids: patient-level rate is undefined".into());
        None
    } else {
        Some(global_patient_rate(&patients.iter().map(|p| p.score).collect::<Vec<_>>())?)
    };
    let image_rate = image_level_rate(&scored)?;
    let headline = match options.level {
        Level::Image => Some(image_rate),
        Level::Patient => patient_rate,
    };

    let report = EvalReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        options: options.clone(),
        vocabulary: vocabulary.to_vec(),
        input_records: records.len(),
        records: scored.len(),
        confusion: cm.matrix,
        accuracy: rates.accuracy,
        sensitivity: rates.sensitivity,
        specificity: rates.specificity,
        auc,
        roc,
        patients,
        patient_rate,
        image_rate,
        headline,
        warnings,
        config,
    };
    Ok((report, scored))
}

/// Runs eval-mode inference of `checkpoint` over the selected records of
/// `manifest` and evaluates the predictions.
///
/// Returns the report, the per-record predictions and the scored
/// (possibly aggregated) predictions.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &Manifest,
    options: &EvalOptions,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<PredictionRecord>, Vec<PredictionRecord>)> {
    let meta = &checkpoint.meta;
    let vocabulary = meta.task.vocabulary(manifest.dataset())?;
    if vocabulary != meta.vocabulary {
        return Err(Error::Data(format!(
            "vocabulary mismatch: checkpoint has [{}], manifest yields [{}]",
            meta.vocabulary.join(", "),
            vocabulary.join(", ")
        )));
    }
    let mut model = checkpoint.restore_model()?;
    if model.config.num_classes != vocabulary.len() {
        return Err(Error::Data(format!(
            "model has {} outputs for {} classes",
            model.config.num_classes,
            vocabulary.len()
        )));
    }
    let selected: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| options.split.is_none_or(|s| r.split == s))
        .filter(|r| options.magnification.is_none_or(|m| r.magnification == Some(m)))
        .cloned()
        .collect();
    if selected.is_empty() {
        return Err(Error::Data("no manifest records match the evaluation filters".into()));
    }
    let subset = manifest.derive(selected, &manifest.meta.stage, manifest.meta.seed, manifest.meta.layout);
    let [_, h, w] = model.config.input;
    let data = ImageDataset::new(&subset, meta.task, (w as u32, h as u32), meta.normalization)?;
    let indices: Vec<usize> = (0..subset.records.len()).collect();
    let probs = predict_probs(&mut model, &data, &indices, options.batch_size)?;

    let mut records = Vec::with_capacity(probs.len());
    for (r, p) in subset.records.iter().zip(probs) {
        records.push(PredictionRecord::from_probs(
            r.path.to_string_lossy().into_owned(),
            subset.parent_of(r),
            r.patient_id.clone(),
            r.label_index(meta.task, subset.dataset())?,
            p,
        )?);
    }
    let (report, scored) = evaluate_predictions(&records, &vocabulary, options, config)?;
    Ok((report, records, scored))
}

/// CSV `sample,parent,patient,true,pred,p_0..p_{K-1}`.
pub fn predictions_csv(records: &[PredictionRecord], classes: usize) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = ["sample", "parent", "patient", "true", "pred"].map(String::from).to_vec();
    header.extend((0..classes).map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.sample.clone(), r.parent.clone(), r.patient.clone(), r.truth.to_string(), r.pred.to_string()];
        row.extend(r.probs.iter().map(|p| p.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

/// CSV `threshold,fpr,tpr`.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One row shaped like a published results table.
    pub fn summary_csv(&self) -> String {
        let o = &self.options;
        let mag = o.magnification.map(|m| m.to_string()).unwrap_or_else(|| "all".into());
        let level = serde_json::to_value(o.level).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let agg = serde_json::to_value(o.aggregation).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        format!(
            "level,aggregation,magnification,records,image_rate,patient_rate,accuracy,sensitivity,specificity,auc\n{level},{agg},{mag},{},{},{},{},{},{},{}\n",
            self.records,
            self.image_rate,
            opt(self.patient_rate),
            self.accuracy,
            opt(self.sensitivity),
            opt(self.specificity),
            opt(self.auc)
        )
    }

    pub fn patients_csv(&self) -> String {
        let mut out = String::from("patient_id,images,correct,score\n");
        for p in &self.patients {
            let _ = writeln!(out, "{},{},{},{}", p.patient_id, p.images, p.correct, p.score);
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = format!("truth\\pred,{}\n", self.vocabulary.join(","));
        for (label, row) in self.vocabulary.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }

    /// Writes `report.json`, `summary.csv`, `patients.csv`, `confusion.csv`,
    /// `roc.csv` (binary) or `roc_<class>.csv`, and the prediction CSVs.
    pub fn write(&self, dir: &Path, records: &[PredictionRecord], scored: &[PredictionRecord]) -> Result<()> {
        let k = self.vocabulary.len();
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fsutil::write_atomic(&dir.join("report.json"), &json)?;
        fsutil::write_atomic(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        fsutil::write_atomic(&dir.join("patients.csv"), self.patients_csv().as_bytes())?;
        fsutil::write_atomic(&dir.join("confusion.csv"), self.confusion_csv().as_bytes())?;
        for roc in &self.roc {
            let name = if k == 2 { "roc.csv".to_string() } else { format!("roc_{}.csv", roc.class) };
            fsutil::write_atomic(&dir.join(name), roc_csv(&roc.points).as_bytes())?;
        }
        fsutil::write_atomic(&dir.join("predictions.csv"), &predictions_csv(records, k)?)?;
        if self.options.aggregation != Aggregation::None {
            fsutil::write_atomic(&dir.join("image_predictions.csv"), &predictions_csv(scored, k)?)?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of one metric across reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Summarises repeated runs: every metric defined in at least one report.
pub fn summarize(reports: &[EvalReport]) -> Vec<MetricSummary> {
    let metrics: [(&'static str, fn(&EvalReport) -> Option<f64>); 7] = [
        ("image_rate", |r| Some(r.image_rate)),
        ("patient_rate", |r| r.patient_rate),
        ("accuracy", |r| Some(r.accuracy)),
        ("sensitivity", |r| r.sensitivity),
        ("specificity", |r| r.specificity),
        ("auc", |r| r.auc),
        ("headline", |r| r.headline),
    ];
    metrics
        .iter()
        .filter_map(|(name, get)| {
            let v: Vec<f64> = reports.iter().filter_map(get).collect();
            if v.is_empty() {
                return None;
            }
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Some(MetricSummary { metric: name, n, mean, std })
        })
        .collect()
}

pub fn summary_table_csv(rows: &[MetricSummary]) -> String {
    let mut out = String::from("metric,n,mean,std,mean_pct,std_pct\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.2},{:.2}", r.metric, r.n, r.mean, r.std, 100.0 * r.mean, 100.0 * r.std);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(sample: &str, parent: &str, patient: &str, truth: usize, p1: f64) -> PredictionRecord {
        PredictionRecord::from_probs(sample.into(), parent.into(), patient.into(), truth, vec![1.0 - p1, p1]).unwrap()
    }

    fn vocab() -> Vec<String> {
        vec!["benign".into(), "malignant".into()]
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let rs = vec![rec("a", "a", "p1", 0, 0.1), rec("b", "b", "p1", 1, 0.9), rec("c", "c", "p2", 1, 0.8)];
        let (r, _) = evaluate_predictions(&rs, &vocab(), &EvalOptions::default(), serde_json::Value::Null).unwrap();
        assert_eq!(r.image_rate, 1.0);
        assert_eq!(r.patient_rate, Some(1.0));
        assert_eq!((r.sensitivity, r.specificity, r.auc), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(r.patients.len(), 2);
    }

    #[test]
    fn wta_groups_by_parent() {
        let rs = vec![
            rec("x0", "x", "p", 1, 0.9),
            rec("x1", "x", "p", 1, 0.2),
            rec("x2", "x", "p", 1, 0.7),
            rec("y0", "y", "p", 0, 0.6),
            rec("y1", "y", "p", 0, 0.4),
            rec("y2", "y", "p", 0, 0.7),
        ];
        let opts = EvalOptions {
            aggregation: Aggregation::Wta,
            ..EvalOptions::default()
        };
        let (r, scored) = evaluate_predictions(&rs, &vocab(), &opts, serde_json::Value::Null).unwrap();
        assert_eq!((r.input_records, r.records), (6, 2));
        assert_eq!(scored.iter().map(|s| s.pred).collect::<Vec<_>>(), vec![1, 1]);
        assert_eq!(r.image_rate, 0.5);
    }

    #[test]
    fn summary_statistics() {
        let rs = vec![rec("a", "a", "p1", 0, 0.1), rec("b", "b", "p1", 1, 0.9)];
        let (mut r1, _) = evaluate_predictions(&rs, &vocab(), &EvalOptions::default(), serde_json::Value::Null).unwrap();
        let mut r2 = r1.clone();
        r1.image_rate = 0.9;
        r2.image_rate = 0.7;
        let s = summarize(&[r1, r2]);
        let image = s.iter().find(|m| m.metric == "image_rate").unwrap();
        assert!((image.mean - 0.8).abs() < 1e-12);
        assert!((image.std - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_shapes() {
        let rs = vec![rec("a", "a", "p1", 0, 0.25)];
        let text = String::from_utf8(predictions_csv(&rs, 2).unwrap()).unwrap();
        assert_eq!(text, "sample,parent,patient,true,pred,p_0,p_1\na,a,p1,0,0,0.75,0.25\n");
        let pts = [RocPoint {
            threshold: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        }];
        assert_eq!(roc_csv(&pts), "threshold,fpr,tpr\ninf,0,0\n");
    }
}
