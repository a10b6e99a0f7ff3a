//! Mini-batch momentum SGD with a step learning-rate schedule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RunMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Irrcnn;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    /// Per-step decay `lr / (1 + decay * step)`; `None` means
    /// `initial_lr / epochs_per_trial`, zero disables it.
    pub decay: Option<f64>,
    pub epochs_per_trial: usize,
    /// Trials run back to back; the learning rate drops tenfold at each boundary.
    pub trials: usize,
    pub batch_size: usize,
    pub loss: Loss,
    /// Save a checkpoint every this many epochs; zero saves only the final one.
    pub checkpoint_every: usize,
    /// Fraction of training patients held out for validation accuracy.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            momentum: 0.9,
            decay: None,
            epochs_per_trial: 50,
            trials: 3,
            batch_size: 32,
            loss: Loss::CrossEntropy,
            checkpoint_every: 10,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return fail("initial_lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.decay.is_some_and(|d| !(d >= 0.0 && d.is_finite())) {
            return fail("decay must be non-negative");
        }
        if self.epochs_per_trial == 0 || self.trials == 0 || self.batch_size == 0 {
            return fail("epochs_per_trial, trials and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn effective_decay(&self) -> f64 {
        self.decay
            .unwrap_or(self.initial_lr / self.epochs_per_trial as f64)
    }

    pub fn total_epochs(&self) -> usize {
        self.trials * self.epochs_per_trial
    }
}

/// Learning rate for `epoch` (zero-based) at optimizer step `global_step`.
pub fn lr_schedule(epoch: usize, global_step: u64, config: &TrainConfig) -> f64 {
    let drops = (epoch / config.epochs_per_trial) as i32;
    let base = config.initial_lr * 10f64.powi(-drops);
    let decay = config.effective_decay();
    if decay > 0.0 {
        base / (1.0 + decay * global_step as f64)
    } else {
        base
    }
}

/// Classical momentum: `v <- momentum * v - lr * g`, then `theta <- theta + v`.
pub fn sgd_step(param: &mut Tensor<f32>, grad: &Tensor<f32>, velocity: &mut Tensor<f32>, lr: f64, momentum: f64) {
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    /// One-based index of the completed epoch.
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Mean training-mode batch loss.
    pub train_loss: f64,
    /// Eval-mode accuracy over the training indices after the epoch.
    pub train_acc: f64,
    /// Eval-mode accuracy over the validation indices; `None` without a validation set.
    pub val_acc: Option<f64>,
}

/// CSV `epoch,lr,train_loss,train_acc,val_acc`; a missing validation accuracy is empty.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for h in history {
        let val = h.val_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.train_acc, val));
    }
    out
}

/// Receives progress while training runs.
pub trait Observer {
    fn epoch_end(&mut self, _stats: &EpochStats) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` epochs.
    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;

impl Observer for Silent {}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Irrcnn<f32>,
    pub config: TrainConfig,
    pub meta: RunMeta,
    pub velocities: Vec<Tensor<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(model: Irrcnn<f32>, config: TrainConfig, meta: RunMeta) -> Result<Self> {
        config.validate()?;
        let velocities = model
            .store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Ok(Self {
            model,
            config,
            meta,
            velocities,
            epoch: 0,
            global_step: 0,
        })
    }

    /// Continues from a checkpoint, restoring parameters, statistics and momentum.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = checkpoint.restore_model()?;
        let velocities = checkpoint.velocities(&model)?;
        let mut t = Self::new(model, config, checkpoint.meta.clone())?;
        t.velocities = velocities;
        t.epoch = checkpoint.epoch;
        t.global_step = checkpoint.global_step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.velocities), self.epoch, self.global_step, self.meta.clone())
    }

    /// One forward/backward pass and parameter update; returns the batch loss.
    fn step(&mut self, batch: Tensor<f32>, labels: &[usize], lr: f64, rng: &mut rng::StreamRng) -> Result<f64> {
        let mut graph = Graph::new();
        let x = graph.constant(batch);
        let out = self.model.forward(&mut graph, x, Mode::Train, rng)?;
        let loss = graph.cross_entropy(out.probs, labels)?;
        let value = graph.value(loss).item()? as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        graph.backward(loss)?;
        let momentum = self.config.momentum;
        for ((p, &v), vel) in self
            .model
            .store
            .params_mut()
            .iter_mut()
            .zip(&out.bound)
            .zip(&mut self.velocities)
        {
            let zeros;
            let g = match graph.grad(v) {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(p.value.shape().to_vec());
                    &zeros
                }
            };
            sgd_step(&mut p.value, g, vel, lr, momentum);
        }
        self.global_step += 1;
        Ok(value)
    }

    /// Runs one epoch over `train` (shuffled by a stream keyed on the epoch).
    pub fn run_epoch(&mut self, data: &dyn Dataset, train: &[usize], validation: &[usize]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let epoch = self.epoch;
        let mut order = train.to_vec();
        order.shuffle(&mut rng::item_stream(self.meta.seed, "shuffle", epoch as u64));
        let mut dropout = rng::item_stream(self.meta.seed, "dropout", epoch as u64);
        let lr0 = lr_schedule(epoch, self.global_step, &self.config);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let lr = lr_schedule(epoch, self.global_step, &self.config);
            let (batch, labels) = data.batch(chunk)?;
            let loss = self.step(batch, &labels, lr, &mut dropout)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at epoch {}", epoch + 1)));
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        self.epoch += 1;
        let train_acc = accuracy(&mut self.model, data, train, self.config.batch_size)?;
        let val_acc = if validation.is_empty() {
            None
        } else {
            Some(accuracy(&mut self.model, data, validation, self.config.batch_size)?)
        };
        Ok(EpochStats {
            epoch: self.epoch,
            lr: lr0,
            train_loss: loss_sum / seen as f64,
            train_acc,
            val_acc,
        })
    }

    /// Trains until `trials * epochs_per_trial` epochs are complete.
    ///
    /// A non-finite loss aborts with [`Error::Diverged`], carrying the state at
    /// the end of the last finite epoch.
    pub fn fit(
        &mut self,
        data: &dyn Dataset,
        train: &[usize],
        validation: &[usize],
        observer: &mut dyn Observer,
    ) -> Result<Vec<EpochStats>> {
        let mut history = Vec::new();
        let mut last_good = self.checkpoint();
        while self.epoch < self.config.total_epochs() {
            let stats = match self.run_epoch(data, train, validation) {
                Ok(s) => s,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Diverged {
                        epoch: self.epoch + 1,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            observer.epoch_end(&stats)?;
            history.push(stats);
            last_good = self.checkpoint();
            let every = self.config.checkpoint_every;
            if every > 0 && self.epoch % every == 0 {
                observer.checkpoint(&last_good)?;
            }
        }
        Ok(history)
    }
}

/// Eval-mode predicted class per index.
pub fn predict_classes(model: &mut Irrcnn<f32>, data: &dyn Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_probs(model, data, indices, batch_size)?
        .iter()
        .map(|p| argmax(p))
        .collect())
}

/// Eval-mode probability vector per index.
pub fn predict_probs(
    model: &mut Irrcnn<f32>,
    data: &dyn Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = data.batch(chunk)?;
        let probs = model.predict(&batch)?;
        out.extend(probs.data().chunks(k).map(|row| row.iter().map(|&p| p as f64).collect()));
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn accuracy(model: &mut Irrcnn<f32>, data: &dyn Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let preds = predict_classes(model, data, indices, batch_size)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == data.label(i))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InMemoryDataset;
    use crate::model::ModelConfig;

    fn no_decay() -> TrainConfig {
        TrainConfig {
            decay: Some(0.0),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_steps_at_trial_boundaries() {
        let c = no_decay();
        assert_eq!(lr_schedule(0, 0, &c), 0.01);
        assert_eq!(lr_schedule(49, 0, &c), 0.01);
        assert!((lr_schedule(50, 0, &c) - 0.001).abs() < 1e-18);
        assert!((lr_schedule(100, 0, &c) - 0.0001).abs() < 1e-18);
        let d = TrainConfig::default();
        assert!((d.effective_decay() - 0.0002).abs() < 1e-18);
        assert!((lr_schedule(0, 10, &d) - 0.01 / 1.002).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_schedule(e, e as u64 * 3, &d);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn momentum_step_by_hand() {
        let mut p = Tensor::new([1], vec![1.0f32]).unwrap();
        let mut v = Tensor::zeros([1]);
        sgd_step(&mut p, &Tensor::new([1], vec![0.5]).unwrap(), &mut v, 0.1, 0.9);
        assert!((v.data()[0] + 0.05).abs() < 1e-7 && (p.data()[0] - 0.95).abs() < 1e-7);

        let mut q = Tensor::new([2], vec![3.0f32, -1.0]).unwrap();
        let mut w = Tensor::zeros([2]);
        sgd_step(&mut q, &Tensor::zeros([2]), &mut w, 0.1, 0.9);
        assert_eq!(q.data(), &[3.0, -1.0]);

        let mut r = Tensor::new([1], vec![2.0f32]).unwrap();
        let mut u = Tensor::new([1], vec![7.0f32]).unwrap();
        sgd_step(&mut r, &Tensor::new([1], vec![4.0]).unwrap(), &mut u, 0.25, 0.0);
        assert_eq!(r.data(), &[1.0]);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // L = 0.5 * |theta|^2, so g = theta.
        let mut theta = Tensor::new([3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let mut v = Tensor::zeros([3]);
        let loss = |t: &Tensor<f32>| 0.5 * t.data().iter().map(|x| x * x).sum::<f32>();
        let before = loss(&theta);
        let g = theta.clone();
        sgd_step(&mut theta, &g, &mut v, 1e-3, 0.9);
        assert!(loss(&theta) < before);
    }

    fn tiny_data() -> InMemoryDataset {
        let inputs = (0..4)
            .map(|i| Tensor::from_fn([3, 32, 32], |j| ((i * 31 + j) % 17) as f32 / 17.0 - 0.5))
            .collect();
        InMemoryDataset {
            inputs,
            labels: vec![0, 1, 0, 1],
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let model = Irrcnn::build(&ModelConfig::toy(), 1).unwrap();
        let before = model.store.params().to_vec();
        let config = TrainConfig {
            initial_lr: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, config, RunMeta::default()).unwrap();
        let data = tiny_data();
        t.run_epoch(&data, &[0, 1, 2, 3], &[]).unwrap();
        for (a, b) in before.iter().zip(t.model.store.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn diverging_run_returns_last_good_state() {
        let model = Irrcnn::build(&ModelConfig::toy(), 1).unwrap();
        let config = TrainConfig {
            initial_lr: 1e30,
            decay: Some(0.0),
            batch_size: 4,
            epochs_per_trial: 5,
            trials: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, config, RunMeta::default()).unwrap();
        let err = t.fit(&tiny_data(), &[0, 1, 2, 3], &[], &mut Silent).unwrap_err();
        match err {
            Error::Diverged { epoch, last_good } => {
                assert!(epoch >= 1);
                assert_eq!(last_good.epoch, epoch - 1);
                assert!(last_good.tensors.iter().all(|t| t.tensor.all_finite()));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![EpochStats {
            epoch: 1,
            lr: 0.01,
            train_loss: 0.5,
            train_acc: 1.0,
            val_acc: None,
        }];
        assert_eq!(history_csv(&h), "epoch,lr,train_loss,train_acc,val_acc\n1,0.01,0.5,1,\n");
    }
}
