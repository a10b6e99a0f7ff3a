//! Recurrent convolutional layers, inception-recurrent-residual units,
//! transition units and the assembled classifier.
//!
//! Layers own no tensors themselves: they hold [`ParamId`]s into a
//! [`ParamStore`] and are evaluated against a [`ForwardCtx`], which carries the
//! graph, the bound parameter variables and the batch-norm statistics.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Mode, PoolKind, RunningStats, Var};
use crate::kernels::{axis_geometry, Padding};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Filled by [`ParamStore::capture_grads`] after a backward pass.
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors plus named batch-norm statistics, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, stats: RunningStats<T>) -> StatsId {
        self.stats.push((name.into(), stats));
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars plus running means and variances.
    pub fn total_count(&self) -> usize {
        self.trainable_count() + self.stats.iter().map(|(_, s)| 2 * s.channels()).sum::<usize>()
    }

    /// Registers every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.value.clone())).collect()
    }

    /// Copies leaf gradients from `graph` into each parameter; parameters the
    /// loss does not reach get a zero gradient.
    pub fn capture_grads(&mut self, graph: &Graph<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            p.grad = Some(
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())),
            );
        }
    }

    pub fn ledger(&self) -> Vec<(String, usize)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.len())).collect()
    }
}

/// Everything a layer needs while recording its forward pass.
pub struct ForwardCtx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub bound: &'a [Var],
    pub stats: &'a mut [(String, RunningStats<T>)],
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
}

impl<T: Scalar> ForwardCtx<'_, T> {
    fn var(&self, id: ParamId) -> Var {
        self.bound[id.0]
    }
}

/// He-style fan-in scaled Gaussian.
fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std)
    })
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&shape, in_channels * kernel * kernel, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_channels])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.graph
            .conv2d(x, w, b, (self.stride, self.stride), self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        // Explicitly initialised so that a freshly built model can run in eval mode.
        let stats = store.add_stats(name, RunningStats::identity(channels));
        Self { gamma, beta, stats }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let stats = &mut ctx.stats[self.stats.0].1;
        ctx.graph.batch_norm(x, gamma, beta, stats, ctx.mode)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_features, in_features], in_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.graph.dense(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RclSpec {
    /// 1 or 3.
    pub kernel: usize,
    pub out_channels: usize,
    /// Number of recurrent refinements after the feed-forward step.
    pub time_steps: usize,
    pub activation: Activation,
}

/// Recurrent convolutional layer.
///
/// `h(0) = act(conv_f(x) + b)` and `h(s) = act(conv_f(x) + b + conv_r(h(s-1)))`
/// for `s = 1..=t`; both convolutions keep their weights across steps and use
/// "same" padding at stride 1.
#[derive(Clone, Debug)]
pub struct Rcl {
    pub spec: RclSpec,
    /// `conv_f` with the shared bias `b`.
    pub feed_forward: Conv,
    /// `conv_r`, bias-free.
    pub recurrent: Conv,
}

impl Rcl {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        in_channels: usize,
        spec: RclSpec,
    ) -> Result<Self> {
        if spec.out_channels == 0 {
            return Err(Error::Config(format!("{name}: RCL needs at least one output channel")));
        }
        if spec.kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: RCL kernel {} must be odd", spec.kernel)));
        }
        let c = spec.out_channels;
        let feed_forward = Conv::new(store, rng, &format!("{name}.wf"), in_channels, c, spec.kernel, true, 1, Padding::Same);
        let recurrent = Conv::new(store, rng, &format!("{name}.wr"), c, c, spec.kernel, false, 1, Padding::Same);
        Ok(Self {
            spec,
            feed_forward,
            recurrent,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let drive = self.feed_forward.forward(ctx, x)?;
        let mut h = ctx.graph.activation(drive, self.spec.activation);
        for _ in 0..self.spec.time_steps {
            let rec = self.recurrent.forward(ctx, h)?;
            let pre = ctx.graph.add(drive, rec)?;
            h = ctx.graph.activation(pre, self.spec.activation);
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrruSpec {
    pub width: usize,
    pub c_1x1: usize,
    pub c_rcl3x3: usize,
    pub c_pool: usize,
    pub time_steps: usize,
    pub activation: Activation,
}

impl IrruSpec {
    /// Branch split `C/4 : C/2 : C/4`.
    pub fn with_width(width: usize, time_steps: usize, activation: Activation) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(Error::Config(format!(
                "IRRU width {width} must be a positive multiple of 4"
            )));
        }
        Ok(Self {
            width,
            c_1x1: width / 4,
            c_rcl3x3: width / 2,
            c_pool: width / 4,
            time_steps,
            activation,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.c_1x1 + self.c_rcl3x3 + self.c_pool;
        if sum != self.width {
            return Err(Error::Config(format!(
                "IRRU branch widths {} + {} + {} = {sum} do not sum to the block width {}",
                self.c_1x1, self.c_rcl3x3, self.c_pool, self.width
            )));
        }
        if self.c_1x1 == 0 || self.c_rcl3x3 == 0 || self.c_pool == 0 {
            return Err(Error::Config("IRRU branch widths must be positive".into()));
        }
        Ok(())
    }
}

/// Inception recurrent residual unit: three parallel branches (1x1 RCL, 3x3
/// RCL, average pool followed by a 1x1 convolution), concatenated along
/// channels, added to the input, then batch-normalized.
///
/// The pooling-branch projection carries no bias: a per-channel constant there
/// is cancelled exactly by the batch normalization after the residual add.
#[derive(Clone, Debug)]
pub struct Irru {
    pub spec: IrruSpec,
    pub branch_1x1: Rcl,
    pub branch_3x3: Rcl,
    pub pool_projection: Conv,
    pub norm: BatchNorm,
}

impl Irru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        spec: IrruSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let rcl = |kernel, out_channels| RclSpec {
            kernel,
            out_channels,
            time_steps: spec.time_steps,
            activation: spec.activation,
        };
        let branch_1x1 = Rcl::new(store, rng, &format!("{name}.rcl1x1"), spec.width, rcl(1, spec.c_1x1))?;
        let branch_3x3 = Rcl::new(store, rng, &format!("{name}.rcl3x3"), spec.width, rcl(3, spec.c_rcl3x3))?;
        let pool_projection = Conv::new(
            store,
            rng,
            &format!("{name}.pool1x1"),
            spec.width,
            spec.c_pool,
            1,
            false,
            1,
            Padding::Same,
        );
        let norm = BatchNorm::new(store, &format!("{name}.bn"), spec.width);
        Ok(Self {
            spec,
            branch_1x1,
            branch_3x3,
            pool_projection,
            norm,
        })
    }

    /// The concatenated inception output `F(x)`, before the residual add.
    pub fn residual_branch<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let a = self.branch_1x1.forward(ctx, x)?;
        let b = self.branch_3x3.forward(ctx, x)?;
        let pooled = ctx.graph.pool2d(x, PoolKind::Avg, 3, 1, Padding::Same)?;
        let c = self.pool_projection.forward(ctx, pooled)?;
        ctx.graph.concat_channels(&[a, b, c])
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let channels = ctx.graph.value(x).dims4("irru")?.1;
        if channels != self.spec.width {
            return Err(Error::shape(
                "irru",
                format!("input has {channels} channels, unit width is {}", self.spec.width),
            ));
        }
        let f = self.residual_branch(ctx, x)?;
        let sum = ctx.graph.residual_add(x, f)?;
        self.norm.forward(ctx, sum)
    }
}

/// 1x1 projection, activation, 3x3/2 overlapping max pool, dropout.
#[derive(Clone, Debug)]
pub struct Transition {
    pub projection: Conv,
    pub activation: Activation,
    pub dropout: f64,
}

impl Transition {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
        dropout: f64,
    ) -> Self {
        let projection = Conv::new(store, rng, &format!("{name}.proj"), in_channels, out_channels, 1, true, 1, Padding::Same);
        Self {
            projection,
            activation,
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.graph.value(x).dims4("transition")?;
        if h < 3 || w < 3 {
            return Err(Error::shape(
                "transition",
                format!("spatial extent {h}x{w} is smaller than the 3x3 pooling window"),
            ));
        }
        let y = self.projection.forward(ctx, x)?;
        let y = ctx.graph.activation(y, self.activation);
        let y = ctx.graph.pool2d(y, PoolKind::Max, 3, 2, Padding::Valid)?;
        let mode = ctx.mode;
        ctx.graph.dropout(y, self.dropout, mode, ctx.rng)
    }
}

/// Declarative description of the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels, height, width.
    pub input: [usize; 3],
    pub stem_widths: Vec<usize>,
    pub block_widths: Vec<usize>,
    pub irrus_per_block: usize,
    pub time_steps: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub num_classes: usize,
    /// Width of an optional hidden dense layer before the output layer; 0 disables it.
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    /// Full-size configuration: 3x128x128 input, eight classes.
    pub fn standard() -> Self {
        Self {
            input: [3, 128, 128],
            stem_widths: vec![32, 64],
            block_widths: vec![128, 256, 512, 1024],
            irrus_per_block: 1,
            time_steps: 2,
            activation: Activation::Relu,
            dropout_p: 0.5,
            num_classes: 8,
            classifier_hidden: 0,
        }
    }

    /// Desk-scale configuration used by the learning-dynamics checks.
    pub fn toy() -> Self {
        Self {
            input: [3, 32, 32],
            stem_widths: vec![4, 8],
            block_widths: vec![16, 32],
            irrus_per_block: 1,
            time_steps: 2,
            activation: Activation::Relu,
            dropout_p: 0.5,
            num_classes: 2,
            classifier_hidden: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.stem_widths.is_empty() || self.stem_widths.contains(&0) {
            return Err(Error::Config("stem needs at least one convolution of positive width".into()));
        }
        if self.block_widths.is_empty() {
            return Err(Error::Config("at least one block is required".into()));
        }
        if let Some(w) = self.block_widths.iter().find(|&&w| w == 0 || w % 4 != 0) {
            return Err(Error::Config(format!("block width {w} is not a positive multiple of 4")));
        }
        if self.irrus_per_block == 0 {
            return Err(Error::Config("irrus_per_block must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {} (need >= 2)", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p = {} outside [0, 1)", self.dropout_p)));
        }
        self.spatial_plan().map(|_| ())
    }

    /// Spatial extent (height, width) at the input, after the stem pool, and
    /// after each transition.
    pub fn spatial_plan(&self) -> Result<Vec<(usize, usize)>> {
        let pool = |(h, w): (usize, usize), stage: &str| -> Result<(usize, usize)> {
            let fail = |_| {
                Error::Config(format!(
                    "input {}x{} too small: spatial extent {h}x{w} at {stage} is below the 3x3 pooling window",
                    self.input[1], self.input[2]
                ))
            };
            let (oh, _) = axis_geometry("pool", "height", h, 3, 2, Padding::Valid).map_err(fail)?;
            let (ow, _) = axis_geometry("pool", "width", w, 3, 2, Padding::Valid).map_err(fail)?;
            Ok((oh, ow))
        };
        let mut plan = vec![(self.input[1], self.input[2])];
        plan.push(pool(plan[0], "the stem pool")?);
        for i in 0..self.block_widths.len() {
            let next = pool(*plan.last().unwrap(), &format!("transition {} (block {})", i + 1, i + 1))?;
            plan.push(next);
        }
        Ok(plan)
    }
}

#[derive(Clone, Debug)]
pub struct StemLayer {
    pub conv: Conv,
    pub norm: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub transition: Transition,
    pub irrus: Vec<Irru>,
}

/// Result of [`Irrcnn::forward`].
pub struct Forward {
    pub probs: Var,
    pub bound: Vec<Var>,
    /// Spatial extents at the input, after the stem pool and after each block.
    pub trace: Vec<(usize, usize)>,
}

/// The assembled classifier.
///
/// Layout: stem convolutions (3x3, bias-free, each followed by batch norm and activation)
/// and a 3x3/2 max pool; then for every block width a transition projecting to
/// that width followed by `irrus_per_block` IRRUs; then global average
/// pooling, dense layer(s) and softmax.
#[derive(Clone, Debug)]
pub struct Irrcnn<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Vec<StemLayer>,
    pub blocks: Vec<Block>,
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl<T: Scalar> Irrcnn<T> {
    /// Builds the network with seeded He initialisation.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "init");
        let rng: &mut dyn RngCore = &mut rng;
        let act = config.activation;

        let mut channels = config.input[0];
        let mut stem = Vec::new();
        for (i, &w) in config.stem_widths.iter().enumerate() {
            let conv = Conv::new(&mut store, rng, &format!("stem.conv{i}"), channels, w, 3, false, 1, Padding::Same);
            let norm = BatchNorm::new(&mut store, &format!("stem.bn{i}"), w);
            stem.push(StemLayer { conv, norm });
            channels = w;
        }

        let mut blocks = Vec::new();
        for (b, &width) in config.block_widths.iter().enumerate() {
            let transition = Transition::new(
                &mut store,
                rng,
                &format!("block{b}.transition"),
                channels,
                width,
                act,
                config.dropout_p,
            );
            let spec = IrruSpec::with_width(width, config.time_steps, act)?;
            let irrus = (0..config.irrus_per_block)
                .map(|u| Irru::new(&mut store, rng, &format!("block{b}.irru{u}"), spec))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block { transition, irrus });
            channels = width;
        }

        let hidden = (config.classifier_hidden > 0).then(|| {
            let d = Dense::new(&mut store, rng, "head.hidden", channels, config.classifier_hidden);
            channels = config.classifier_hidden;
            d
        });
        let output = Dense::new(&mut store, rng, "head.output", channels, config.num_classes);

        Ok(Self {
            config: config.clone(),
            store,
            stem,
            blocks,
            hidden,
            output,
        })
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn total_parameter_count(&self) -> usize {
        self.store.total_count()
    }

    /// Records the forward pass of `batch` on `graph` and returns class probabilities.
    pub fn forward(&mut self, graph: &mut Graph<T>, batch: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Forward> {
        let (_, c, h, w) = graph.value(batch).dims4("model_forward")?;
        let [ec, eh, ew] = self.config.input;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::shape(
                "model_forward",
                format!("batch sample is {c}x{h}x{w}, model expects {ec}x{eh}x{ew}"),
            ));
        }
        let bound = self.store.bind(graph);
        let (stats_ptr, act) = (&mut self.store.stats, self.config.activation);
        let mut ctx = ForwardCtx {
            graph,
            bound: &bound,
            stats: stats_ptr,
            mode,
            rng,
        };
        let mut trace = vec![(h, w)];
        let spatial = |ctx: &ForwardCtx<'_, T>, v: Var| {
            let s = ctx.graph.value(v).shape();
            (s[2], s[3])
        };

        let mut x = batch;
        for layer in &self.stem {
            x = layer.conv.forward(&mut ctx, x)?;
            x = layer.norm.forward(&mut ctx, x)?;
            x = ctx.graph.activation(x, act);
        }
        x = ctx.graph.pool2d(x, PoolKind::Max, 3, 2, Padding::Valid)?;
        trace.push(spatial(&ctx, x));
        for block in &self.blocks {
            x = block.transition.forward(&mut ctx, x)?;
            trace.push(spatial(&ctx, x));
            for unit in &block.irrus {
                x = unit.forward(&mut ctx, x)?;
            }
        }
        x = ctx.graph.global_avg_pool(x)?;
        if let Some(hidden) = &self.hidden {
            x = hidden.forward(&mut ctx, x)?;
            x = ctx.graph.activation(x, act);
        }
        let logits = self.output.forward(&mut ctx, x)?;
        let probs = ctx.graph.softmax(logits)?;
        Ok(Forward { probs, bound, trace })
    }

    /// Eval-mode class probabilities for a batch.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(batch.clone());
        // Eval mode draws no random numbers; the stream only satisfies the signature.
        let mut unused = rng::stream(0, "eval");
        let out = self.forward(&mut graph, x, Mode::Eval, &mut unused)?;
        Ok(graph.value(out.probs).clone())
    }
}
