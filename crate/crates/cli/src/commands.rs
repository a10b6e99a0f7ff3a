use std::path::{Path, PathBuf};
use std::str::FromStr;

use irrcnn::checkpoint::{Checkpoint, RunMeta};
use irrcnn::data::split::holdout_patients;
use irrcnn::data::{
    augment_manifest, ingest, patch_manifest, split_by_patient, ChannelStats, ImageDataset, Manifest, Split,
};
use irrcnn::eval::report::{summarize, summary_table_csv};
use irrcnn::eval::{evaluate, EvalReport};
use irrcnn::fsutil;
use irrcnn::gradcheck::{self, GradcheckConfig};
use irrcnn::model::Irrcnn;
use irrcnn::train::{history_csv, EpochStats, Observer, Trainer};
use irrcnn::{Error, Result};
use serde::de::DeserializeOwned;

use crate::config::RunConfig;

const MANIFEST: &str = "manifest.csv";

/// Parses a flag value with a usage error on failure.
pub fn parse_flag<T: FromStr>(flag: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("--{flag} {value}: {e}")))
}

/// Parses a flag value through the type's JSON spelling.
pub fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|e| Error::Config(format!("--{flag} {value}: {e}")))
}

fn write_config(out: &Path, config: &RunConfig) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&config.to_value())?;
    bytes.push(b'\n');
    fsutil::write_atomic(&out.join("config.json"), &bytes)
}

/// Refuses to write a manifest over the one being read.
fn output_manifest(input: &Path, out: &Path) -> Result<PathBuf> {
    let target = out.join(MANIFEST);
    let same = match (input.canonicalize(), target.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Error::Config(format!(
            "--out {} would overwrite the input manifest; choose another directory",
            out.display()
        )));
    }
    Ok(target)
}

fn save_manifest(mut manifest: Manifest, path: &Path, config: &RunConfig) -> Result<Manifest> {
    manifest.meta.config = config.to_value();
    manifest.save(path)?;
    Ok(manifest)
}

fn class_counts(manifest: &Manifest) -> String {
    let mut counts = std::collections::BTreeMap::new();
    for r in &manifest.records {
        *counts.entry(r.class.to_string()).or_insert(0usize) += 1;
    }
    counts
        .iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn ingest_cmd(config: &RunConfig, out: &Path) -> Result<()> {
    let root = config
        .dataset
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("ingest needs --root or dataset.root".into()))?;
    let (manifest, report) = ingest(root, config.dataset.id, config.dataset.magnification)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    fsutil::create_dir_all(out)?;
    let manifest = save_manifest(manifest, &out.join(MANIFEST), config)?;
    write_config(out, config)?;
    println!("ingested {} records ({})", manifest.records.len(), class_counts(&manifest));
    for (k, v) in &report.counts {
        println!("  {k}: {v}");
    }
    Ok(())
}

pub fn split_cmd(config: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let target = output_manifest(manifest_path, out)?;
    let (split, warnings) = split_by_patient(&manifest, config.dataset.train_fraction, config.seed)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    fsutil::create_dir_all(out)?;
    let split = save_manifest(split, &target, config)?;
    write_config(out, config)?;
    let count = |s| split.in_split(s).count();
    let patients = |s| {
        split
            .in_split(s)
            .map(|r| r.patient_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    };
    println!(
        "train {} records / {} patients, test {} records / {} patients",
        count(Split::Train),
        patients(Split::Train),
        count(Split::Test),
        patients(Split::Test)
    );
    Ok(())
}

pub fn augment_cmd(config: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let target = output_manifest(manifest_path, out)?;
    let augmented = augment_manifest(&manifest, &config.pipeline.augment_config(), config.seed, out)?;
    let augmented = save_manifest(augmented, &target, config)?;
    write_config(out, config)?;
    println!("{} inputs -> {} augmented images", manifest.records.len(), augmented.records.len());
    Ok(())
}

pub fn patch_cmd(config: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let target = output_manifest(manifest_path, out)?;
    let patched = patch_manifest(&manifest, &config.pipeline.patch_config(), config.seed, out)?;
    let patched = save_manifest(patched, &target, config)?;
    write_config(out, config)?;
    println!("{} inputs -> {} patches", manifest.records.len(), patched.records.len());
    Ok(())
}

/// Writes the history after every epoch and periodic checkpoints.
struct FileObserver {
    dir: PathBuf,
    history: Vec<EpochStats>,
}

impl Observer for FileObserver {
    fn epoch_end(&mut self, stats: &EpochStats) -> Result<()> {
        let val = stats.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        log::info!(
            "epoch {} lr {:.3e} loss {:.4} train_acc {:.4}{val}",
            stats.epoch,
            stats.lr,
            stats.train_loss,
            stats.train_acc
        );
        self.history.push(stats.clone());
        fsutil::write_atomic(&self.dir.join("history.csv"), history_csv(&self.history).as_bytes())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        fsutil::create_dir_all(&dir)?;
        checkpoint.save(&dir.join(format!("epoch_{:04}.irrc", checkpoint.epoch)))
    }
}

pub fn train_cmd(config: &RunConfig, manifest_path: &Path, restarts: usize, out: &Path) -> Result<()> {
    if restarts == 0 {
        return Err(Error::Config("--restarts must be at least 1".into()));
    }
    let manifest = Manifest::load(manifest_path)?;
    let task = config.dataset.task;
    let vocabulary = task.vocabulary(manifest.dataset())?;
    let mut config = config.clone();
    config.model.num_classes = vocabulary.len();
    config.model.validate()?;

    let records: Vec<_> = manifest
        .in_split(Split::Train)
        .filter(|r| config.dataset.magnification.is_none_or(|m| r.magnification == Some(m)))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: no train records; run the split stage first",
            manifest_path.display()
        )));
    }
    let train_set = manifest.derive(records, "train", Some(config.seed), manifest.meta.layout);
    let paths: Vec<PathBuf> = train_set.records.iter().map(|r| r.path.clone()).collect();
    let stats = ChannelStats::compute(&paths)?;
    let [_, h, w] = config.model.input;
    let data = ImageDataset::new(&train_set, task, (w as u32, h as u32), stats)?;
    let all: Vec<usize> = (0..train_set.records.len()).collect();
    let (train_idx, val_idx) =
        holdout_patients(&train_set.records, &all, config.train.validation_fraction, config.seed)?;
    log::info!(
        "{} training and {} validation images, {} classes, {} epochs",
        train_idx.len(),
        val_idx.len(),
        vocabulary.len(),
        config.train.total_epochs()
    );

    fsutil::create_dir_all(out)?;
    write_config(out, &config)?;
    for r in 0..restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let dir = if restarts > 1 { out.join(format!("restart_{r}")) } else { out.to_path_buf() };
        fsutil::create_dir_all(&dir)?;
        let model = Irrcnn::<f32>::build(&config.model, seed)?;
        let meta = RunMeta {
            seed,
            normalization: stats,
            task,
            vocabulary: vocabulary.clone(),
            config: config.to_value(),
        };
        let mut trainer = Trainer::new(model, config.train.clone(), meta)?;
        let mut observer = FileObserver {
            dir: dir.clone(),
            history: Vec::new(),
        };
        match trainer.fit(&data, &train_idx, &val_idx, &mut observer) {
            Ok(_) => {}
            Err(Error::Diverged { epoch, last_good }) => {
                let path = dir.join("last_good.irrc");
                last_good.save(&path)?;
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}; last finite state saved to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e),
        }
        trainer.checkpoint().save(&dir.join("checkpoint.irrc"))?;
        if let Some(last) = observer.history.last() {
            let val = last.val_acc.map(|v| format!(", val_acc {v:.4}")).unwrap_or_default();
            println!(
                "{}: {} epochs, train_loss {:.4}, train_acc {:.4}{val}",
                dir.display(),
                last.epoch,
                last.train_loss,
                last.train_acc
            );
        }
    }
    Ok(())
}

pub fn eval_cmd(config: &RunConfig, checkpoint: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest_path)?;
    let (report, records, scored) = evaluate(&ckpt, &manifest, &config.eval, config.to_value())?;
    fsutil::create_dir_all(out)?;
    report.write(out, &records, &scored)?;
    write_config(out, config)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} records ({} scored): image_rate {:.4}, patient_rate {}, sensitivity {}, specificity {}, auc {}",
        report.input_records,
        report.records,
        report.image_rate,
        opt(report.patient_rate),
        opt(report.sensitivity),
        opt(report.specificity),
        opt(report.auc)
    );
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck_cmd(config: &GradcheckConfig, out: &Path) -> Result<bool> {
    let results = gradcheck::run(config)?;
    let mut csv = String::from("check,trials,max_rel_error,passed\n");
    println!("{:<24} {:>6} {:>14} {:>9}  result", "check", "trials", "max rel error", "time");
    for r in &results {
        println!(
            "{:<24} {:>6} {:>14.3e} {:>8.2}s  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.elapsed.as_secs_f64(),
            if r.passed { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{},{}\n", r.name, r.trials, r.max_rel_error, r.passed));
    }
    fsutil::create_dir_all(out)?;
    fsutil::write_atomic(&out.join("gradcheck.csv"), csv.as_bytes())?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed (tolerance {:e})", results.len(), config.tolerance);
    Ok(failed == 0)
}

pub fn report_cmd(config: &RunConfig, reports: &[PathBuf], out: &Path) -> Result<()> {
    let loaded = reports
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_slice::<EvalReport>(&bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&loaded);
    fsutil::create_dir_all(out)?;
    fsutil::write_atomic(&out.join("summary.csv"), summary_table_csv(&rows).as_bytes())?;
    write_config(out, config)?;
    for r in &rows {
        println!("{:<14} {:6.2} +- {:5.2}  (n = {})", r.metric, 100.0 * r.mean, 100.0 * r.std, r.n);
    }
    Ok(())
}
