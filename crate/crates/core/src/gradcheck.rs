//! Central finite-difference verification of every differentiable operation.
//!
//! Each check builds a small double-precision computation, reduces its output
//! to a scalar by projecting onto fixed random weights, and compares the
//! reverse-mode gradient of every checked tensor against the central
//! difference `(L(x + h) - L(x - h)) / 2h`, one coordinate at a time.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Activation, Graph, Mode, PoolKind, RunningStats, Var};
use crate::kernels::Padding;
use crate::model::{ForwardCtx, Irru, IrruSpec, ParamStore, Rcl, RclSpec, Transition};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds a scalar loss from the leaves bound to `inputs`.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Largest relative error over every coordinate of every input.
///
/// `perturb` adds a fixed offset to the analytic gradient; it exists only so
/// the harness itself can be tested against a known-bad gradient.
pub fn max_relative_error(inputs: &[Tensor<f64>], loss: &LossFn<'_>, step: f64, perturb: f64) -> Result<f64> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        g.value(l).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j] + perturb;
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Independent random instances per check.
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Name of a check whose analytic gradient is deliberately corrupted.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            step: 1e-5,
            tolerance: 1e-4,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub elapsed: Duration,
}

/// A named random problem: returns the checked tensors and the loss builder.
struct Case {
    name: &'static str,
    build: fn(&mut StreamRng) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>),
}

fn gaussian(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values bounded away from zero so that no ReLU kink sits within a step.
fn away_from_zero(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen::<bool>() { m } else { -m }
    })
}

/// Distinct values at least 0.01 apart, so max-pool winners are stable under perturbation.
fn distinct(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.01 - 0.3)
}

/// Projects `out` onto fixed weights: `sum(out * r)`.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Wraps `op` so that its output is projected onto weights drawn from `rng`.
fn projected(
    rng: &mut StreamRng,
    out_shape: &[usize],
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Box<LossFn<'static>> {
    let weights = gaussian(out_shape, rng);
    Box::new(move |g, v| {
        let out = op(g, v)?;
        project(g, out, &weights)
    })
}

fn unit_ctx_loss<L: 'static>(
    store: ParamStore<f64>,
    layer: L,
    input_shape: [usize; 4],
    out_shape: [usize; 4],
    mode: Mode,
    rng: &mut StreamRng,
    forward: fn(&L, &mut ForwardCtx<'_, f64>, Var) -> Result<Var>,
) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut inputs = vec![gaussian(&input_shape, rng)];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let weights = gaussian(&out_shape, rng);
    let stats = store.stats().to_vec();
    let dropout_seed: u64 = rng.gen();
    let loss = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut stats = stats.clone();
        let mut drop = rng::stream(dropout_seed, "gradcheck-dropout");
        let mut ctx = ForwardCtx {
            graph: g,
            bound: &v[1..],
            stats: &mut stats,
            mode,
            rng: &mut drop,
        };
        let out = forward(&layer, &mut ctx, v[0])?;
        project(g, out, &weights)
    };
    (inputs, Box::new(loss))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d",
            build: |r| {
                let inputs = vec![gaussian(&[2, 3, 5, 5], r), gaussian(&[4, 3, 3, 3], r), gaussian(&[4], r)];
                let loss = projected(r, &[2, 4, 5, 5], |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), Padding::Same));
                (inputs, loss)
            },
        },
        Case {
            name: "conv2d_strided",
            build: |r| {
                let inputs = vec![gaussian(&[1, 2, 7, 6], r), gaussian(&[3, 2, 3, 3], r), gaussian(&[3], r)];
                let loss = projected(r, &[1, 3, 4, 3], |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 2), Padding::Same));
                (inputs, loss)
            },
        },
        Case {
            name: "max_pool",
            build: |r| {
                let inputs = vec![distinct(&[2, 2, 7, 7], r)];
                let loss = projected(r, &[2, 2, 3, 3], |g, v| g.pool2d(v[0], PoolKind::Max, 3, 2, Padding::Valid));
                (inputs, loss)
            },
        },
        Case {
            name: "avg_pool",
            build: |r| {
                let inputs = vec![gaussian(&[2, 2, 5, 6], r)];
                let loss = projected(r, &[2, 2, 5, 6], |g, v| g.pool2d(v[0], PoolKind::Avg, 3, 1, Padding::Same));
                (inputs, loss)
            },
        },
        Case {
            name: "relu",
            build: |r| {
                let inputs = vec![away_from_zero(&[3, 7], r)];
                let loss = projected(r, &[3, 7], |g, v| Ok(g.relu(v[0])));
                (inputs, loss)
            },
        },
        Case {
            name: "elu",
            build: |r| {
                let inputs = vec![gaussian(&[3, 7], r)];
                let loss = projected(r, &[3, 7], |g, v| Ok(g.elu(v[0])));
                (inputs, loss)
            },
        },
        Case {
            name: "batch_norm_train",
            build: |r| {
                let inputs = vec![gaussian(&[3, 2, 3, 3], r), gaussian(&[2], r), gaussian(&[2], r)];
                let loss = projected(r, &[3, 2, 3, 3], |g, v| {
                    let mut stats = RunningStats::new(2);
                    g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)
                });
                (inputs, loss)
            },
        },
        Case {
            name: "batch_norm_eval",
            build: |r| {
                let inputs = vec![gaussian(&[2, 3, 2, 2], r), gaussian(&[3], r), gaussian(&[3], r)];
                let mut stats = RunningStats::identity(3);
                stats.mean = gaussian(&[3], r);
                stats.var = Tensor::from_fn([3], |_| r.gen_range(0.5..2.0));
                let loss = projected(r, &[2, 3, 2, 2], move |g, v| {
                    let mut s = stats.clone();
                    g.batch_norm(v[0], v[1], v[2], &mut s, Mode::Eval)
                });
                (inputs, loss)
            },
        },
        Case {
            name: "dropout",
            build: |r| {
                let inputs = vec![gaussian(&[2, 3, 4, 4], r)];
                let seed: u64 = r.gen();
                let loss = projected(r, &[2, 3, 4, 4], move |g, v| {
                    g.dropout(v[0], 0.5, Mode::Train, &mut rng::stream(seed, "dropout"))
                });
                (inputs, loss)
            },
        },
        Case {
            name: "concat_channels",
            build: |r| {
                let inputs = vec![gaussian(&[2, 1, 3, 3], r), gaussian(&[2, 3, 3, 3], r), gaussian(&[2, 2, 3, 3], r)];
                let loss = projected(r, &[2, 6, 3, 3], |g, v| g.concat_channels(v));
                (inputs, loss)
            },
        },
        Case {
            name: "residual_add",
            build: |r| {
                let inputs = vec![gaussian(&[2, 2, 3, 3], r), gaussian(&[2, 2, 3, 3], r)];
                let loss = projected(r, &[2, 2, 3, 3], |g, v| g.residual_add(v[0], v[1]));
                (inputs, loss)
            },
        },
        Case {
            name: "dense",
            build: |r| {
                let inputs = vec![gaussian(&[3, 5], r), gaussian(&[4, 5], r), gaussian(&[4], r)];
                let loss = projected(r, &[3, 4], |g, v| g.dense(v[0], v[1], v[2]));
                (inputs, loss)
            },
        },
        Case {
            name: "global_avg_pool",
            build: |r| {
                let inputs = vec![gaussian(&[2, 3, 4, 5], r)];
                let loss = projected(r, &[2, 3], |g, v| g.global_avg_pool(v[0]));
                (inputs, loss)
            },
        },
        Case {
            name: "softmax",
            build: |r| {
                let inputs = vec![gaussian(&[4, 5], r)];
                let loss = projected(r, &[4, 5], |g, v| g.softmax(v[0]));
                (inputs, loss)
            },
        },
        Case {
            name: "softmax_cross_entropy",
            build: |r| {
                let inputs = vec![gaussian(&[5, 4], r)];
                let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
                let loss: Box<LossFn<'static>> = Box::new(move |g, v| {
                    let p = g.softmax(v[0])?;
                    g.cross_entropy(p, &labels)
                });
                (inputs, loss)
            },
        },
        Case {
            name: "rcl",
            build: |r| {
                let mut store = ParamStore::new();
                let spec = RclSpec {
                    kernel: 3,
                    out_channels: 3,
                    time_steps: 2,
                    activation: Activation::Relu,
                };
                let layer = Rcl::new(&mut store, r, "rcl", 2, spec).expect("valid spec");
                unit_ctx_loss(store, layer, [2, 2, 5, 5], [2, 3, 5, 5], Mode::Train, r, |l, c, x| l.forward(c, x))
            },
        },
        Case {
            name: "irru",
            build: |r| {
                let mut store = ParamStore::new();
                let spec = IrruSpec::with_width(8, 2, Activation::Relu).expect("width divisible by 4");
                let layer = Irru::new(&mut store, r, "irru", spec).expect("valid spec");
                unit_ctx_loss(store, layer, [2, 8, 6, 6], [2, 8, 6, 6], Mode::Train, r, |l, c, x| l.forward(c, x))
            },
        },
        Case {
            name: "irru_elu",
            build: |r| {
                let mut store = ParamStore::new();
                let spec = IrruSpec::with_width(8, 2, Activation::Elu).expect("width divisible by 4");
                let layer = Irru::new(&mut store, r, "irru", spec).expect("valid spec");
                unit_ctx_loss(store, layer, [2, 8, 6, 6], [2, 8, 6, 6], Mode::Train, r, |l, c, x| l.forward(c, x))
            },
        },
        Case {
            name: "transition",
            build: |r| {
                let mut store = ParamStore::new();
                let layer = Transition::new(&mut store, r, "t", 3, 4, Activation::Elu, 0.5);
                unit_ctx_loss(store, layer, [2, 3, 7, 7], [2, 4, 3, 3], Mode::Train, r, |l, c, x| l.forward(c, x))
            },
        },
    ]
}

/// Instances with a ReLU input closer to zero than this many steps are redrawn:
/// the loss is not differentiable there and the central difference straddles the kink.
const KINK_MARGIN_STEPS: f64 = 10.0;

fn draw_differentiable(
    case: &Case,
    rng: &mut StreamRng,
    step: f64,
) -> Result<(Vec<Tensor<f64>>, Box<LossFn<'static>>)> {
    loop {
        let (inputs, loss) = (case.build)(rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        loss(&mut g, &vars)?;
        if g.relu_margin().map_or(true, |m| m > KINK_MARGIN_STEPS * step) {
            return Ok((inputs, loss));
        }
    }
}

/// Names of every check, in execution order.
pub fn check_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs the full suite.
pub fn run(config: &GradcheckConfig) -> Result<Vec<CheckOutcome>> {
    cases()
        .into_iter()
        .map(|case| {
            let start = Instant::now();
            let perturb = if config.inject_fault.as_deref() == Some(case.name) { 0.05 } else { 0.0 };
            let mut worst = 0.0f64;
            for trial in 0..config.trials {
                let mut r = rng::item_stream(config.seed, case.name, trial as u64);
                let (inputs, loss) = draw_differentiable(&case, &mut r, config.step)?;
                worst = worst.max(max_relative_error(&inputs, loss.as_ref(), config.step, perturb)?);
            }
            Ok(CheckOutcome {
                name: case.name,
                trials: config.trials,
                max_rel_error: worst,
                passed: worst < config.tolerance,
                elapsed: start.elapsed(),
            })
        })
        .collect()
}
