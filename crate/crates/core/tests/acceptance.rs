//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use irrcnn::checkpoint::{Checkpoint, RunMeta};
use irrcnn::data::transform::{center_origin, center_patch, crop};
use irrcnn::data::{
    augment_manifest, patch_manifest, split_by_patient, AugmentConfig, ClassLabel, DatasetId, InMemoryDataset,
    Magnification, Manifest, PatchConfig, PatchMode, SampleRecord, Split,
};
use irrcnn::eval::{
    aggregate, auc_mann_whitney, confusion_and_rates, evaluate_predictions, Aggregation, Averaging, EvalOptions,
    EvalReport, PredictionRecord,
};
use irrcnn::gradcheck::{self, GradcheckConfig};
use irrcnn::model::{ForwardCtx, Irrcnn, ModelConfig, ParamStore, Rcl, RclSpec};
use irrcnn::train::{history_csv, lr_schedule, predict_classes, EpochStats, TrainConfig, Trainer};
use irrcnn::{rng, Activation, Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("RCL unroll oracle", rcl_oracle),
        ("architecture shape trace", shape_trace),
        ("pipeline counts", pipeline_counts),
        ("patient split", patient_split),
        ("metric oracles", metric_oracles),
        ("winner-take-all", winner_take_all),
        ("learning dynamics", learning_dynamics),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// Criterion 1.

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let config = GradcheckConfig {
        seed: 2024,
        trials: 20,
        step: 1e-5,
        tolerance: 1e-4,
        inject_fault: None,
    };
    let results = gradcheck::run(&config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let names: Vec<_> = results.iter().map(|r| r.name).collect();
    ensure!(names.contains(&"irru"), "no full IRRU check in the suite");
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    let failing: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    ensure!(failing.is_empty(), "checks above 1e-4: {}", failing.join(", "));
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} checks x 20 seeds, worst {} at {:.2e}, {:.1}s",
        results.len(),
        worst.name,
        worst.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

// Criterion 2.

/// Direct "same"-padded stride-1 convolution, written out index by index.
fn naive_conv(x: &[f64], shape: [usize; 4], w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Vec<f64> {
    let [n, c, h, wd] = shape;
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * o * h * wd];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[oc]);
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + y as usize) * wd + xx as usize];
                                acc += w.data()[((oc * c + ic) * k + di) * k + dj] * xv;
                            }
                        }
                    }
                    out[((b * o + oc) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

fn rcl_forward(store: &mut ParamStore<f64>, layer: &Rcl, x: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let bound = store.bind(&mut g);
    let mut unused = rng::stream(0, "unused");
    let xv = g.constant(x.clone());
    let mut ctx = ForwardCtx {
        graph: &mut g,
        bound: &bound,
        stats: store.stats_mut(),
        mode: Mode::Eval,
        rng: &mut unused,
    };
    let out = layer.forward(&mut ctx, xv).expect("rcl forward");
    g.value(out).data().to_vec()
}

fn rcl_oracle() -> Outcome {
    let shape = [2, 3, 6, 5];
    let mut worst = 0.0f64;
    for kernel in [1, 3] {
        for t in 0..=3 {
            let mut r = rng::item_stream(7, "rcl-oracle", (kernel * 10 + t) as u64);
            let mut store = ParamStore::<f64>::new();
            let spec = RclSpec {
                kernel,
                out_channels: 4,
                time_steps: t,
                activation: Activation::Relu,
            };
            let layer = Rcl::new(&mut store, &mut r, "rcl", shape[1], spec).map_err(|e| e.to_string())?;
            let bias_id = layer.feed_forward.bias.ok_or("feed-forward conv has no bias")?;
            store.get_mut(bias_id).value = Tensor::from_fn([4], |_| r.gen_range(-0.5..0.5));
            let x = Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0));
            let got = rcl_forward(&mut store, &layer, &x);

            let wf = store.get(layer.feed_forward.weight).value.clone();
            let b = store.get(bias_id).value.clone();
            let wr = store.get(layer.recurrent.weight).value.clone();
            let drive = naive_conv(x.data(), shape, &wf, Some(&b));
            let hshape = [shape[0], 4, shape[2], shape[3]];
            let mut h: Vec<f64> = drive.iter().map(|&v| v.max(0.0)).collect();
            for _ in 0..t {
                let rec = naive_conv(&h, hshape, &wr, None);
                h = drive.iter().zip(&rec).map(|(d, r)| (d + r).max(0.0)).collect();
            }
            for (a, e) in got.iter().zip(&h) {
                let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-300);
                if a != e {
                    worst = worst.max(rel);
                }
            }
            ensure!(worst <= 1e-12, "kernel {kernel} t={t}: relative error {worst:.3e}");

            // With zero recurrent weights every step reproduces the feed-forward response.
            store.get_mut(layer.recurrent.weight).value = Tensor::zeros(wr.shape().to_vec());
            let collapsed = rcl_forward(&mut store, &layer, &x);
            let mut plain_store = store.clone();
            let plain = Rcl {
                spec: RclSpec { time_steps: 0, ..spec },
                ..layer.clone()
            };
            let expected = rcl_forward(&mut plain_store, &plain, &x);
            ensure!(collapsed == expected, "kernel {kernel} t={t}: w_r = 0 does not collapse to t = 0");
        }
    }
    Ok(format!("kernels 1 and 3, t = 0..3, worst relative error {worst:.2e}; w_r = 0 collapse exact"))
}

// Criterion 3.

/// Trainable parameters of the default configuration counted layer by layer.
fn expected_parameters(cfg: &ModelConfig) -> usize {
    let mut total = 0;
    let mut cin = cfg.input[0];
    for &w in &cfg.stem_widths {
        total += cin * w * 9 + 2 * w;
        cin = w;
    }
    for &c in &cfg.block_widths {
        total += cin * c + c;
        let (q, h) = (c / 4, c / 2);
        let rcl1 = c * q + q + q * q;
        let rcl3 = 9 * c * h + h + 9 * h * h;
        let pool = c * q;
        total += cfg.irrus_per_block * (rcl1 + rcl3 + pool + 2 * c);
        cin = c;
    }
    total + cin * cfg.num_classes + cfg.num_classes
}

fn shape_trace() -> Outcome {
    let cfg = ModelConfig::standard();
    let mut model = Irrcnn::<f32>::build(&cfg, 11).map_err(|e| e.to_string())?;
    let again = Irrcnn::<f32>::build(&cfg, 12).map_err(|e| e.to_string())?;
    let count = model.trainable_parameter_count();
    ensure!(count == again.trainable_parameter_count(), "parameter count depends on the seed");
    ensure!(count == expected_parameters(&cfg), "count {count} != layer-by-layer {}", expected_parameters(&cfg));
    ensure!((7_000_000..=12_000_000).contains(&count), "{count} parameters outside [7M, 12M]");

    let mut r = rng::stream(3, "input");
    let x = Tensor::from_fn([1, 3, 128, 128], |_| r.gen_range(-1.0f32..1.0));
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x);
    let mut unused = rng::stream(0, "unused");
    let out = model.forward(&mut g, xv, Mode::Eval, &mut unused).map_err(|e| e.to_string())?;
    let heights: Vec<usize> = out.trace.iter().map(|&(h, _)| h).collect();
    ensure!(heights == [128, 63, 31, 15, 7, 3], "spatial trace {heights:?}");
    ensure!(out.trace.iter().all(|&(h, w)| h == w), "non-square trace {:?}", out.trace);
    let probs = g.value(out.probs);
    ensure!(probs.shape() == [1, 8], "probability shape {:?}", probs.shape());
    let sum: f64 = probs.data().iter().map(|&p| p as f64).sum();
    ensure!((sum - 1.0).abs() <= 1e-6, "probability row sums to {sum}");
    Ok(format!(
        "trace {heights:?}, row sum {sum:.9}, {count} trainable parameters"
    ))
}

// Criterion 4.

fn tiny_manifest(dir: &Path, n: usize, w: u32, h: u32) -> Result<Manifest, String> {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i % 3 == 0 { ClassLabel::Malignant } else { ClassLabel::Benign };
        let path = dir.join(format!("src/{}/img{i:05}.png", class.as_str()));
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 40 + i as u32) as u8, (y * 60) as u8, (i % 251) as u8]));
        img.save(&path).map_err(|e| e.to_string())?;
        records.push(SampleRecord {
            path,
            patient_id: format!("p{:02}", i % 24),
            magnification: Some(Magnification::X100),
            class,
            subclass: None,
            split: Split::Unassigned,
        });
    }
    Ok(Manifest::new(DatasetId::Breakhis, records))
}

fn per_parent(m: &Manifest) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in &m.records {
        *counts.entry(m.parent_of(r)).or_insert(0) += 1;
    }
    counts
}

fn pipeline_counts() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = AugmentConfig::default();
    let mut details = Vec::new();
    for (n, expected) in [(1995usize, 41_895usize), (249, 5229)] {
        let dir = tmp.path().join(format!("n{n}"));
        let src = tiny_manifest(&dir, n, 4, 3)?;
        let out = augment_manifest(&src, &cfg, 5, &dir.join("aug")).map_err(|e| e.to_string())?;
        ensure!(out.records.len() == expected, "{n} inputs gave {} augmented records", out.records.len());
        let files = walk_png(&dir.join("aug"));
        ensure!(files == expected, "{n} inputs wrote {files} images");
        ensure!(per_parent(&out).values().all(|&c| c == 21), "a parent does not have exactly 21 images");
        details.push(format!("{n} -> {expected}"));
    }

    let dir = tmp.path().join("patches");
    let src = tiny_manifest(&dir, 3, 40, 30)?;
    let pc = PatchConfig {
        mode: PatchMode::RandomPatch,
        size: 16,
        count: 200,
    };
    let out = patch_manifest(&src, &pc, 9, &dir.join("out")).map_err(|e| e.to_string())?;
    let counts = per_parent(&out);
    ensure!(counts.len() == 3 && counts.values().all(|&c| c == 200), "patch counts {counts:?}");
    details.push("200 patches per image".into());

    ensure!(center_origin(2040, 1536, 128) == (956, 704), "centre origin {:?}", center_origin(2040, 1536, 128));
    let big = RgbImage::from_fn(2040, 1536, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 7) as u8]));
    let patch = center_patch(&big, 128).map_err(|e| e.to_string())?;
    ensure!(patch == crop(&big, 956, 704, 128), "centre patch is not the crop at (956, 704)");
    ensure!(patch.get_pixel(0, 0) == big.get_pixel(956, 704), "centre patch origin pixel differs");
    details.push("centre of 2040x1536 at (956, 704)".into());
    Ok(details.join(", "))
}

fn walk_png(dir: &Path) -> usize {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count()
}

// Criterion 5.

fn patient_split() -> Outcome {
    let mut records = Vec::new();
    for p in 0..20 {
        for k in 0..(1 + (p * 7) % 13) {
            records.push(SampleRecord {
                path: format!("/data/p{p:02}/img{k}.png").into(),
                patient_id: format!("p{p:02}"),
                magnification: None,
                class: if p % 2 == 0 { ClassLabel::Benign } else { ClassLabel::Malignant },
                subclass: None,
                split: Split::Unassigned,
            });
        }
    }
    let total = records.len();
    let manifest = Manifest::new(DatasetId::Breakhis, records);
    let target = 0.7 * total as f64;
    let mut min_frac = f64::INFINITY;
    let mut max_frac = 0.0f64;
    for seed in 0..1000u64 {
        let (m, _) = split_by_patient(&manifest, 0.7, seed).map_err(|e| e.to_string())?;
        let mut train_patients = BTreeMap::new();
        let mut test_patients = BTreeSet::new();
        for r in &m.records {
            match r.split {
                Split::Train => *train_patients.entry(r.patient_id.clone()).or_insert(0usize) += 1,
                Split::Test => {
                    test_patients.insert(r.patient_id.clone());
                }
                Split::Unassigned => return Err(format!("seed {seed}: unassigned record")),
            }
        }
        ensure!(
            train_patients.keys().all(|p| !test_patients.contains(p)),
            "seed {seed}: a patient is in both splits"
        );
        let train: usize = train_patients.values().sum();
        ensure!(train as f64 >= target, "seed {seed}: train holds {train}/{total}");
        // Minimal overshoot: some train patient is the one whose addition crossed the target.
        ensure!(
            train_patients.values().any(|&n| ((train - n) as f64) < target),
            "seed {seed}: train {train} overshoots beyond one patient"
        );
        let frac = train as f64 / total as f64;
        min_frac = min_frac.min(frac);
        max_frac = max_frac.max(frac);
    }
    Ok(format!(
        "1000 seeds, {total} samples over 20 patients, train fraction in [{min_frac:.3}, {max_frac:.3}]"
    ))
}

// Criterion 6.

fn record(sample: &str, parent: &str, patient: &str, truth: usize, probs: Vec<f64>) -> PredictionRecord {
    PredictionRecord::from_probs(sample.into(), parent.into(), patient.into(), truth, probs).expect("valid record")
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(17, "metric-fixtures");
    let mut fixtures = 0;
    for n in 2..=50usize {
        for _ in 0..20 {
            let levels = r.gen_range(2..12);
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let got = auc_mann_whitney(&scores, &labels).map_err(|e| e.to_string())?;
            let want = brute_force_auc(&scores, &labels);
            ensure!(got == want, "n={n}: AUC {got} != brute force {want}");
            fixtures += 1;
        }
    }

    // Patients with 4/4, 3/5 and 0/2 images correct.
    let mut recs = Vec::new();
    let mut push = |patient: &str, right: usize, wrong: usize| {
        for k in 0..right + wrong {
            let pred_right = k < right;
            let p1 = if pred_right { 0.9 } else { 0.1 };
            recs.push(record(&format!("{patient}-{k}"), &format!("{patient}-{k}"), patient, 1, vec![1.0 - p1, p1]));
        }
    };
    push("A", 4, 0);
    push("B", 3, 2);
    push("C", 0, 2);
    let vocab = vec!["benign".to_string(), "malignant".to_string()];
    let (report, _) =
        evaluate_predictions(&recs, &vocab, &EvalOptions::default(), serde_json::Value::Null).map_err(|e| e.to_string())?;
    let p_rt = (1.0 + 0.6 + 0.0) / 3.0;
    ensure!(report.patient_rate == Some(p_rt), "P_rt {:?} != {p_rt}", report.patient_rate);
    ensure!(report.image_rate == 7.0 / 11.0, "I_rt {} != 7/11", report.image_rate);
    let scores: Vec<f64> = report.patients.iter().map(|p| p.score).collect();
    ensure!(scores == [1.0, 0.6, 0.0], "patient scores {scores:?}");

    // Two patients, two and three images, all correct / one wrong.
    let small = vec![
        record("a", "a", "X", 0, vec![0.8, 0.2]),
        record("b", "b", "X", 0, vec![0.7, 0.3]),
        record("c", "c", "Y", 1, vec![0.4, 0.6]),
        record("d", "d", "Y", 1, vec![0.6, 0.4]),
        record("e", "e", "Y", 1, vec![0.1, 0.9]),
    ];
    let (rep, _) =
        evaluate_predictions(&small, &vocab, &EvalOptions::default(), serde_json::Value::Null).map_err(|e| e.to_string())?;
    ensure!(rep.patient_rate == Some((1.0 + 2.0 / 3.0) / 2.0), "P_rt {:?}", rep.patient_rate);
    ensure!(rep.image_rate == 4.0 / 5.0, "I_rt {}", rep.image_rate);

    let mut worst = 0.0f64;
    for trial in 0..200 {
        let k = 2 + trial % 5;
        let n = r.gen_range(1..60);
        let recs: Vec<PredictionRecord> = (0..n)
            .map(|i| {
                let truth = r.gen_range(0..k);
                let pred = r.gen_range(0..k);
                let mut probs = vec![0.0; k];
                probs[pred] = 1.0;
                record(&format!("s{i}"), &format!("s{i}"), "", truth, probs)
            })
            .collect();
        let (_, rates) = confusion_and_rates(&recs, k, Averaging::Macro).map_err(|e| e.to_string())?;
        let (sens, spec) = macro_loop_oracle(&recs, k);
        for (got, want, what) in [(rates.sensitivity, sens, "sensitivity"), (rates.specificity, spec, "specificity")] {
            match (got, want) {
                (Some(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    ensure!((g - w).abs() <= 1e-12, "macro {what} {g} != {w}");
                }
                (None, None) => {}
                _ => return Err(format!("macro {what}: {got:?} vs oracle {want:?}")),
            }
        }
    }
    Ok(format!(
        "{fixtures} AUC fixtures exact, P_rt = {p_rt:.6} and I_rt = 7/11 exact, macro rates within {worst:.1e}"
    ))
}

/// Per-class one-vs-rest rates from raw records; classes absent from the truth are skipped.
fn macro_loop_oracle(recs: &[PredictionRecord], k: usize) -> (Option<f64>, Option<f64>) {
    let mut sens = Vec::new();
    let mut spec = Vec::new();
    for c in 0..k {
        let (mut tp, mut fn_, mut fp, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for r in recs {
            match (r.truth == c, r.pred == c) {
                (true, true) => tp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, true) => fp += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        if tp + fn_ == 0.0 {
            continue;
        }
        sens.push(tp / (tp + fn_));
        if tn + fp > 0.0 {
            spec.push(tn / (tn + fp));
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&sens), mean(&spec))
}

// Criterion 7.

fn patches(parent: &str, patient: &str, truth: usize, probs: &[Vec<f64>]) -> Vec<PredictionRecord> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| record(&format!("{parent}/p{i:03}"), parent, patient, truth, p.clone()))
        .collect()
}

fn winner_take_all() -> Outcome {
    let vote = |pred: usize, k: usize| {
        let mut p = vec![0.125 / (k - 1) as f64; k];
        p[pred] = 0.875;
        p
    };
    // 120 / 70 / 10 votes: class 0 wins.
    let mut probs = Vec::new();
    probs.extend((0..120).map(|_| vote(0, 3)));
    probs.extend((0..70).map(|_| vote(1, 3)));
    probs.extend((0..10).map(|_| vote(2, 3)));
    let out = aggregate(&patches("img", "P", 0, &probs), Aggregation::Wta).map_err(|e| e.to_string())?;
    ensure!(out.len() == 1 && out[0].pred == 0, "plurality gave {:?}", out[0].pred);

    // 100 / 100 split: class 1 holds more probability mass.
    let mut probs = Vec::new();
    probs.extend((0..100).map(|_| vec![0.5, 0.5]));
    probs.extend((0..100).map(|_| vec![0.4375, 0.5625]));
    let g = patches("img", "P", 1, &probs);
    ensure!(g.iter().filter(|r| r.pred == 0).count() == 100, "fixture does not split votes evenly");
    let out = aggregate(&g, Aggregation::Wta).map_err(|e| e.to_string())?;
    ensure!(out[0].pred == 1, "mass tie-break chose {}", out[0].pred);

    // Equal votes and equal mass: the lower index wins.
    let even = patches("img", "P", 0, &[vec![0.25, 0.75], vec![0.75, 0.25]]);
    let out = aggregate(&even, Aggregation::Wta).map_err(|e| e.to_string())?;
    ensure!(out[0].pred == 0, "index tie-break chose {}", out[0].pred);

    // Permutation invariance over a multi-image fixture.
    let mut r = rng::stream(23, "wta-fixture");
    let mut all = Vec::new();
    for img in 0..12 {
        let truth = img % 2;
        let n = r.gen_range(1..30);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let p1 = r.gen_range(0..=8) as f64 / 8.0;
                vec![1.0 - p1, p1]
            })
            .collect();
        all.extend(patches(&format!("img{img:02}"), &format!("P{}", img / 3), truth, &probs));
    }
    let vocab = vec!["benign".to_string(), "malignant".to_string()];
    let opts = EvalOptions {
        aggregation: Aggregation::Wta,
        ..EvalOptions::default()
    };
    let eval = |recs: &[PredictionRecord], o: &EvalOptions| -> Result<(EvalReport, Vec<PredictionRecord>), String> {
        evaluate_predictions(recs, &vocab, o, serde_json::Value::Null).map_err(|e| e.to_string())
    };
    let (base, base_scored) = eval(&all, &opts)?;
    for _ in 0..50 {
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut r);
        let (rep, scored) = eval(&shuffled, &opts)?;
        ensure!(
            scored.iter().map(|s| s.pred).eq(base_scored.iter().map(|s| s.pred)),
            "aggregated labels depend on record order"
        );
        ensure!(rep.confusion == base.confusion && rep.auc == base.auc, "metrics depend on record order");
        ensure!(
            rep.image_rate == base.image_rate && rep.patient_rate == base.patient_rate,
            "rates depend on record order"
        );
    }

    // One patch per image: WTA equals patch-level scoring.
    let single: Vec<PredictionRecord> = (0..40)
        .map(|i| {
            let p1 = r.gen_range(0..=16) as f64 / 16.0;
            record(&format!("img{i:02}/p000"), &format!("img{i:02}"), &format!("P{}", i % 7), i % 2, vec![1.0 - p1, p1])
        })
        .collect();
    let (wta, _) = eval(&single, &opts)?;
    let (plain, _) = eval(&single, &EvalOptions::default())?;
    ensure!(
        wta.confusion == plain.confusion
            && wta.image_rate == plain.image_rate
            && wta.patient_rate == plain.patient_rate
            && wta.sensitivity == plain.sensitivity
            && wta.specificity == plain.specificity
            && wta.auc == plain.auc,
        "one-patch WTA differs from patch-level metrics"
    );
    Ok("plurality, mass and index tie-breaks, 50 permutations, one-patch equivalence".into())
}

// Criterion 8.

/// Eight 3x32x32 images: class 0 bright on top, class 1 bright at the bottom, with noise.
fn synthetic_set() -> InMemoryDataset {
    let mut r = rng::stream(0, "data");
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..8 {
        let label = i % 2;
        let x = Tensor::from_fn([3, 32, 32], |idx| {
            let row = (idx / 32) % 32;
            let top = row < 16;
            let bright = if label == 0 { top } else { !top };
            let base = if bright { 0.25 } else { -0.25 };
            base + r.gen_range(-1.0f32..1.0)
        });
        inputs.push(x);
        labels.push(label);
    }
    InMemoryDataset { inputs, labels }
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs_per_trial: 50,
        trials: 4,
        batch_size: 8,
        checkpoint_every: 0,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    }
}

fn learning_dynamics() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let data = synthetic_set();
    let indices: Vec<usize> = (0..8).collect();
    let start = Instant::now();
    let reached = pool.install(|| -> Result<Option<usize>, String> {
        let model = Irrcnn::<f32>::build(&ModelConfig::toy(), 1).map_err(|e| e.to_string())?;
        let meta = RunMeta {
            seed: 1,
            ..RunMeta::default()
        };
        let mut trainer = Trainer::new(model, toy_train_config(), meta).map_err(|e| e.to_string())?;
        let before = predict_classes(&mut trainer.model, &data, &indices, 8).map_err(|e| e.to_string())?;
        if before == data.labels {
            return Err("the untrained model already separates the set".into());
        }
        while trainer.epoch < 200 {
            let stats = trainer.run_epoch(&data, &indices, &[]).map_err(|e| e.to_string())?;
            if stats.train_acc == 1.0 {
                return Ok(Some(stats.epoch));
            }
        }
        Ok(None)
    })?;
    let elapsed = start.elapsed();
    let epoch = reached.ok_or("train accuracy never reached 100% within 200 epochs")?;
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");

    let cfg = TrainConfig {
        decay: Some(0.0),
        ..toy_train_config()
    };
    let (before, after) = (lr_schedule(49, 0, &cfg), lr_schedule(50, 0, &cfg));
    ensure!(before == cfg.initial_lr, "lr at epoch 49 is {before}");
    ensure!((before / after - 10.0).abs() <= 1e-12, "lr drops from {before} to {after}");
    for e in [0, 25, 48] {
        ensure!(lr_schedule(e, 0, &cfg) == before, "lr changes before epoch 50 (epoch {e})");
    }
    let decayed = toy_train_config();
    let step = 1234;
    let ratio = lr_schedule(49, step, &decayed) / lr_schedule(50, step, &decayed);
    ensure!((ratio - 10.0).abs() <= 1e-12, "with decay the drop is x{ratio}");
    Ok(format!(
        "100% train accuracy at epoch {epoch} ({:.1}s, one thread); lr {before} -> {after} at epoch 50",
        elapsed.as_secs_f64()
    ))
}

// Criterion 9.

fn short_run(seed: u64) -> Result<(Vec<EpochStats>, Vec<u8>, Trainer), String> {
    let data = synthetic_set();
    let indices: Vec<usize> = (0..8).collect();
    let model = Irrcnn::<f32>::build(&ModelConfig::toy(), seed).map_err(|e| e.to_string())?;
    let meta = RunMeta {
        seed,
        ..RunMeta::default()
    };
    let cfg = TrainConfig {
        epochs_per_trial: 2,
        trials: 2,
        batch_size: 3,
        ..toy_train_config()
    };
    let mut trainer = Trainer::new(model, cfg, meta).map_err(|e| e.to_string())?;
    let history = trainer
        .fit(&data, &indices, &[], &mut irrcnn::train::Silent)
        .map_err(|e| e.to_string())?;
    let bytes = trainer.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    Ok((history, bytes, trainer))
}

fn determinism() -> Outcome {
    let (h1, c1, mut trainer) = short_run(42)?;
    let (h2, c2, _) = short_run(42)?;
    ensure!(history_csv(&h1) == history_csv(&h2), "histories differ between identical runs");
    ensure!(h1 == h2, "history values differ bitwise");
    ensure!(c1 == c2, "checkpoint bytes differ between identical runs");
    let (h3, _, _) = short_run(43)?;
    ensure!(h1 != h3, "a different seed reproduced the same history");

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("model.irrc");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure!(loaded.to_bytes().map_err(|e| e.to_string())? == c1, "save/load changes the checkpoint bytes");
    let mut restored = loaded.restore_model().map_err(|e| e.to_string())?;
    let data = synthetic_set();
    let batch = Tensor::stack(&data.inputs).map_err(|e| e.to_string())?;
    let a = trainer.model.predict(&batch).map_err(|e| e.to_string())?;
    let b = restored.predict(&batch).map_err(|e| e.to_string())?;
    let same_bits = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same_bits && a.shape() == b.shape(), "restored model output differs");
    Ok(format!(
        "{} epochs bit-identical across runs, {}-byte checkpoint round trip, forward outputs bit-exact",
        h1.len(),
        c1.len()
    ))
}
