//! The TetCNN model: stacked Chebyshev conv blocks (conv, batch norm, ReLU,
//! pool) over a coarsening hierarchy, global average pooling over real
//! vertices, and a two-layer fully connected head producing one scalar.
//!
//! All forward/backward arithmetic is 64-bit and hand-differentiated; the
//! gradient-check harness in [`gradcheck`] verifies every parameter tensor
//! against central finite differences.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod metrics;
#[cfg(test)]
mod tests;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use metrics::{summarize_folds, ClassCounts, EvalMetrics, MetricSummary};
pub use train::{
    evaluate, fold_split, train, validation_split, EpochRecord, FoldOutcome, TrainConfig,
    TrainOutcome,
};

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::coarsen::{pool_backward, pool_forward, Hierarchy};
use crate::lbo::{Lumping, OperatorKind};
use crate::rng::{stream, Purpose};
use crate::spectral::{cheb_conv_backward, cheb_conv_forward, ChebCache, ChebFilter, SpectralError};

/// Default conv channel widths; the head hidden width matches the last block.
pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
pub const DEFAULT_FC_HIDDEN: usize = 128;
/// Graclus stages consumed by each pooling layer (1/4 down-sampling).
pub const POOL_STAGES_PER_BLOCK: usize = 2;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("hierarchy has {available} stages, model needs {needed}")]
    InsufficientHierarchy { available: usize, needed: usize },
    #[error("sample features are {found} rows, hierarchy level 0 is {expected}")]
    FeatureRows { expected: usize, found: usize },
    #[error("non-finite {context} (training divergence)")]
    NonFinite { context: &'static str },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Learning task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    #[default]
    Classify,
    Regress,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Regress => "regress",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classify" => Some(Task::Classify),
            "regress" => Some(Task::Regress),
            _ => None,
        }
    }
}

/// Supervision attached to a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Label(u8),
    Value(f64),
}

/// One mesh ready for the network: padded features plus its hierarchy.
#[derive(Debug, Clone)]
pub struct MeshSample {
    pub id: String,
    /// Padded level-0 features (fake rows zero).
    pub padded_features: Array2<f64>,
    pub hierarchy: Arc<Hierarchy>,
    pub target: Target,
}

impl MeshSample {
    /// Pad compact per-vertex features through the hierarchy's level-0 layout.
    pub fn new(
        id: impl Into<String>,
        features: ArrayView2<'_, f64>,
        hierarchy: Arc<Hierarchy>,
        target: Target,
    ) -> Result<Self, NetworkError> {
        if features.nrows() != hierarchy.levels[0].n_real {
            return Err(NetworkError::FeatureRows {
                expected: hierarchy.levels[0].n_real,
                found: features.nrows(),
            });
        }
        let padded_features = hierarchy.pad_level0(features);
        Ok(MeshSample { id: id.into(), padded_features, hierarchy, target })
    }
}

/// Model structure settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Chebyshev order K (inclusive highest degree).
    pub order: usize,
    pub in_features: usize,
    pub widths: Vec<usize>,
    pub fc_hidden: usize,
    pub operator: OperatorKind,
    pub lumping: Lumping,
}

impl ModelConfig {
    pub fn standard(task: Task, order: usize) -> Self {
        ModelConfig {
            task,
            order,
            in_features: 3,
            widths: DEFAULT_WIDTHS.to_vec(),
            fc_hidden: DEFAULT_FC_HIDDEN,
            operator: OperatorKind::Lbo,
            lumping: Lumping::FemQuarter,
        }
    }

    /// Graclus stages the model consumes (pooling after all but the last block).
    pub fn stages_needed(&self) -> usize {
        POOL_STAGES_PER_BLOCK * (self.widths.len() - 1)
    }
}

/// Per-channel batch normalization with affine parameters and running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

/// Dense affine layer; weight is (fan_in, fan_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Conv block: Chebyshev filter, batch norm, ReLU, then `pool_stages`
/// max-pooling halvings (0 for the final block).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ChebFilter,
    pub bn: BatchNorm,
    pub pool_stages: usize,
}

/// The full model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Descriptor of one layer in execution order (reported by
/// [`Model::layer_specs`] and stored in checkpoints).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub order: usize,
    pub pool_stages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ChebConv,
    BatchNorm,
    Relu,
    Pool,
    Gap,
    Fc,
    Output,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::ChebConv => "chebconv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Gap => "gap",
            LayerKind::Fc => "fc",
            LayerKind::Output => "output",
        }
    }
}

/// Build a model with seeded initialization: conv and FC weights uniform in
/// `[-a, a]` with `a = 1/sqrt(fan_in * (K+1))`, biases zero, BN affine
/// identity.
pub fn build_model(config: &ModelConfig, seed: u64) -> Model {
    let mut tensor_index = 0u64;
    let mut uniform = |shape_fan_in: usize, terms: usize, len: usize| -> Vec<f64> {
        let a = 1.0 / ((shape_fan_in * terms) as f64).sqrt();
        let mut rng = stream(seed, Purpose::Init, tensor_index);
        tensor_index += 1;
        (0..len).map(|_| rng.random_range(-a..a)).collect()
    };
    let k1 = config.order + 1;
    let mut blocks = Vec::with_capacity(config.widths.len());
    let mut f_in = config.in_features;
    for (b, &f_out) in config.widths.iter().enumerate() {
        let theta = Array3::from_shape_vec(
            (k1, f_in, f_out),
            uniform(f_in, k1, k1 * f_in * f_out),
        )
        .unwrap();
        let pool_stages =
            if b + 1 < config.widths.len() { POOL_STAGES_PER_BLOCK } else { 0 };
        blocks.push(ConvBlock { conv: ChebFilter::new(theta), bn: BatchNorm::new(f_out), pool_stages });
        f_in = f_out;
    }
    let gap_dim = *config.widths.last().unwrap();
    let fc1 = Linear {
        weight: Array2::from_shape_vec(
            (gap_dim, config.fc_hidden),
            uniform(gap_dim, 1, gap_dim * config.fc_hidden),
        )
        .unwrap(),
        bias: Array1::zeros(config.fc_hidden),
    };
    let fc2 = Linear {
        weight: Array2::from_shape_vec(
            (config.fc_hidden, 1),
            uniform(config.fc_hidden, 1, config.fc_hidden),
        )
        .unwrap(),
        bias: Array1::zeros(1),
    };
    Model { config: config.clone(), blocks, fc1, fc2 }
}

impl Model {
    /// Layer descriptors in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut f_in = self.config.in_features;
        for block in &self.blocks {
            let f_out = block.conv.f_out();
            specs.push(LayerSpec {
                kind: LayerKind::ChebConv,
                in_channels: f_in,
                out_channels: f_out,
                order: self.config.order,
                pool_stages: 0,
            });
            specs.push(LayerSpec {
                kind: LayerKind::BatchNorm,
                in_channels: f_out,
                out_channels: f_out,
                order: 0,
                pool_stages: 0,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Relu,
                in_channels: f_out,
                out_channels: f_out,
                order: 0,
                pool_stages: 0,
            });
            if block.pool_stages > 0 {
                specs.push(LayerSpec {
                    kind: LayerKind::Pool,
                    in_channels: f_out,
                    out_channels: f_out,
                    order: 0,
                    pool_stages: block.pool_stages,
                });
            }
            f_in = f_out;
        }
        specs.push(LayerSpec {
            kind: LayerKind::Gap,
            in_channels: f_in,
            out_channels: f_in,
            order: 0,
            pool_stages: 0,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Fc,
            in_channels: f_in,
            out_channels: self.config.fc_hidden,
            order: 0,
            pool_stages: 0,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Output,
            in_channels: self.config.fc_hidden,
            out_channels: 1,
            order: 0,
            pool_stages: 0,
        });
        specs
    }

    /// Total parameter count (conv, BN affine, FC).
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            n += b.conv.theta.len() + b.bn.gamma.len() + b.bn.beta.len();
        }
        n += self.fc1.weight.len() + self.fc1.bias.len();
        n += self.fc2.weight.len() + self.fc2.bias.len();
        n
    }
}

/// Batch-norm mode: batch statistics (training) or running statistics
/// (deterministic inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct BlockCache {
    level: usize,
    cheb: ChebCache,
    bn: BnCache,
    relu_out: Array2<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    block_caches: Vec<BlockCache>,
    pool_argmax: Vec<Vec<u8>>,
    gap_level: usize,
    pub gap_out: Array1<f64>,
    fc1_pre: Array1<f64>,
    fc1_post: Array1<f64>,
    bn_mode: BnMode,
    pub output: f64,
}

impl ForwardCache {
    /// Post-ReLU activations of the final conv block (the GAP input),
    /// in padded indexing.
    pub fn last_conv_activations(&self) -> &Array2<f64> {
        &self.block_caches.last().unwrap().relu_out
    }

    pub fn gap_level(&self) -> usize {
        self.gap_level
    }
}

/// Gradients for every parameter tensor, mirroring [`Model`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub blocks: Vec<BlockGradients>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub theta: Array3<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGradients {
                    theta: Array3::zeros(b.conv.theta.raw_dim()),
                    gamma: Array1::zeros(b.bn.gamma.len()),
                    beta: Array1::zeros(b.bn.beta.len()),
                })
                .collect(),
            fc1_weight: Array2::zeros(model.fc1.weight.raw_dim()),
            fc1_bias: Array1::zeros(model.fc1.bias.len()),
            fc2_weight: Array2::zeros(model.fc2.weight.raw_dim()),
            fc2_bias: Array1::zeros(model.fc2.bias.len()),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.theta.scaled_add(s, &b.theta);
            a.gamma.scaled_add(s, &b.gamma);
            a.beta.scaled_add(s, &b.beta);
        }
        self.fc1_weight.scaled_add(s, &other.fc1_weight);
        self.fc1_bias.scaled_add(s, &other.fc1_bias);
        self.fc2_weight.scaled_add(s, &other.fc2_weight);
        self.fc2_bias.scaled_add(s, &other.fc2_bias);
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.theta.iter().all(|v| v.is_finite())
                && b.gamma.iter().all(|v| v.is_finite())
                && b.beta.iter().all(|v| v.is_finite())
        }) && self.fc1_weight.iter().all(|v| v.is_finite())
            && self.fc1_bias.iter().all(|v| v.is_finite())
            && self.fc2_weight.iter().all(|v| v.is_finite())
            && self.fc2_bias.iter().all(|v| v.is_finite())
    }
}

/// Test-fixture fault switches for the gradient-check harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Flip the sign of routed pooling gradients (harness sensitivity check).
    pub pool_backward_sign_flip: bool,
}

/// Batch-mode batch-norm statistics span every real vertex of every mesh in
/// the window, so per-mesh forwards within a training batch are coupled at
/// each BN layer. The per-batch caches below carry what the joint backward
/// needs.
pub struct BatchCaches {
    pub per_sample: Vec<ForwardCache>,
    /// Per block: (batch mean, unbiased batch variance) for the running-stat
    /// update; present in batch mode.
    bn_moments: Vec<Option<(Array1<f64>, Array1<f64>)>>,
}

/// Run the network on a batch of meshes with layer-synchronized batch
/// normalization: statistics are taken across all real vertices of all
/// samples, in canonical sample order (bit-reproducible).
pub fn forward_batch(
    model: &Model,
    samples: &[&MeshSample],
    bn_mode: BnMode,
) -> Result<BatchCaches, NetworkError> {
    assert!(!samples.is_empty());
    let needed = model.config.stages_needed();
    for sample in samples {
        let hierarchy = &sample.hierarchy;
        if hierarchy.n_stages() < needed {
            return Err(NetworkError::InsufficientHierarchy {
                available: hierarchy.n_stages(),
                needed,
            });
        }
        if sample.padded_features.nrows() != hierarchy.levels[0].padded_n() {
            return Err(NetworkError::FeatureRows {
                expected: hierarchy.levels[0].padded_n(),
                found: sample.padded_features.nrows(),
            });
        }
    }

    let b_count = samples.len();
    let mut xs: Vec<Array2<f64>> =
        samples.iter().map(|s| s.padded_features.clone()).collect();
    let mut level = 0usize;
    let mut block_caches: Vec<Vec<BlockCache>> = (0..b_count).map(|_| Vec::new()).collect();
    let mut pool_argmax: Vec<Vec<Vec<u8>>> = (0..b_count).map(|_| Vec::new()).collect();
    let mut bn_moments = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        // Convolution per sample.
        let mut zs = Vec::with_capacity(b_count);
        let mut chebs = Vec::with_capacity(b_count);
        for (s, sample) in samples.iter().enumerate() {
            let lvl = &sample.hierarchy.levels[level];
            let scaled = lvl.op.scaled().expect("hierarchy levels carry lambda_max");
            let (z, cheb) = cheb_conv_forward(&block.conv, &scaled, xs[s].view())?;
            zs.push(z);
            chebs.push(cheb);
        }
        // Joint batch-norm statistics over all samples' real vertices.
        let f = block.conv.f_out();
        let (mean, var, moments) = match bn_mode {
            BnMode::Batch => {
                let mut mean = Array1::<f64>::zeros(f);
                let mut total = 0usize;
                for (s, sample) in samples.iter().enumerate() {
                    let lvl = &sample.hierarchy.levels[level];
                    total += lvl.n_real;
                    for (slot, &is_real) in lvl.real.iter().enumerate() {
                        if is_real {
                            for c in 0..f {
                                mean[c] += zs[s][(slot, c)];
                            }
                        }
                    }
                }
                let n = total as f64;
                mean /= n;
                let mut var = Array1::<f64>::zeros(f);
                for (s, sample) in samples.iter().enumerate() {
                    let lvl = &sample.hierarchy.levels[level];
                    for (slot, &is_real) in lvl.real.iter().enumerate() {
                        if is_real {
                            for c in 0..f {
                                let d = zs[s][(slot, c)] - mean[c];
                                var[c] += d * d;
                            }
                        }
                    }
                }
                var /= n;
                let unbias = if total > 1 { n / (n - 1.0) } else { 1.0 };
                let var_unbiased = var.mapv(|v| v * unbias);
                (mean.clone(), var, Some((mean, var_unbiased)))
            }
            BnMode::Running => {
                (block.bn.running_mean.clone(), block.bn.running_var.clone(), None)
            }
        };
        bn_moments.push(moments);
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
        // Normalize, affine, ReLU, pool per sample; fake slots stay zero.
        for (s, sample) in samples.iter().enumerate() {
            let lvl = &sample.hierarchy.levels[level];
            let z = &zs[s];
            let mut xhat = Array2::zeros(z.raw_dim());
            let mut y = Array2::zeros(z.raw_dim());
            for (slot, &is_real) in lvl.real.iter().enumerate() {
                if is_real {
                    for c in 0..f {
                        let h = (z[(slot, c)] - mean[c]) * inv_std[c];
                        xhat[(slot, c)] = h;
                        y[(slot, c)] = block.bn.gamma[c] * h + block.bn.beta[c];
                    }
                }
            }
            let relu_out = y.mapv(|v| v.max(0.0));
            let mut x = relu_out.clone();
            for _ in 0..block.pool_stages {
                let (pooled, argmax) = pool_forward(x.view());
                pool_argmax[s].push(argmax);
                x = pooled;
            }
            block_caches[s].push(BlockCache {
                level,
                cheb: std::mem::replace(&mut chebs[s], ChebCache { basis: Vec::new() }),
                bn: BnCache { xhat, inv_std: inv_std.clone() },
                relu_out,
            });
            xs[s] = x;
        }
        level += block.pool_stages;
    }

    // Head per sample: GAP over real vertices, FC, ReLU, FC.
    let mut per_sample = Vec::with_capacity(b_count);
    for (s, sample) in samples.iter().enumerate() {
        let gap_lvl = &sample.hierarchy.levels[level];
        let x = &xs[s];
        let f = x.ncols();
        let mut gap_out = Array1::zeros(f);
        for (slot, &is_real) in gap_lvl.real.iter().enumerate() {
            if is_real {
                for c in 0..f {
                    gap_out[c] += x[(slot, c)];
                }
            }
        }
        gap_out /= gap_lvl.n_real as f64;
        let fc1_pre = gap_out.dot(&model.fc1.weight) + &model.fc1.bias;
        let fc1_post = fc1_pre.mapv(|v| v.max(0.0));
        let output = fc1_post.dot(&model.fc2.weight.column(0)) + model.fc2.bias[0];
        per_sample.push(ForwardCache {
            block_caches: std::mem::take(&mut block_caches[s]),
            pool_argmax: std::mem::take(&mut pool_argmax[s]),
            gap_level: level,
            gap_out,
            fc1_pre,
            fc1_post,
            bn_mode,
            output,
        });
    }
    Ok(BatchCaches { per_sample, bn_moments })
}

/// Single-sample forward: a batch of one.
pub fn forward(
    model: &Model,
    sample: &MeshSample,
    bn_mode: BnMode,
) -> Result<ForwardCache, NetworkError> {
    let mut batch = forward_batch(model, &[sample], bn_mode)?;
    Ok(batch.per_sample.pop().unwrap())
}

/// Fold a batch's BN moments into the running statistics (one momentum step
/// per batch).
pub fn apply_bn_updates(model: &mut Model, batch: &BatchCaches) {
    for (block, moments) in model.blocks.iter_mut().zip(&batch.bn_moments) {
        if let Some((mean, var_unbiased)) = moments {
            for c in 0..block.bn.running_mean.len() {
                block.bn.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * block.bn.running_mean[c] + BN_MOMENTUM * mean[c];
                block.bn.running_var[c] = (1.0 - BN_MOMENTUM) * block.bn.running_var[c]
                    + BN_MOMENTUM * var_unbiased[c];
            }
        }
    }
}

/// Joint reverse-mode pass over a batch: parameter gradients summed across
/// samples (scale `d_outputs` accordingly, e.g. by 1/B for a mean loss) plus
/// each sample's input-feature gradient. Batch-mode BN couples samples
/// through the shared statistics, exactly as in the forward pass.
pub fn backward_batch(
    model: &Model,
    samples: &[&MeshSample],
    batch: &BatchCaches,
    d_outputs: &[f64],
) -> Result<(Gradients, Vec<Array2<f64>>), NetworkError> {
    backward_batch_with_faults(model, samples, batch, d_outputs, &Faults::default())
}

pub(crate) fn backward_batch_with_faults(
    model: &Model,
    samples: &[&MeshSample],
    batch: &BatchCaches,
    d_outputs: &[f64],
    faults: &Faults,
) -> Result<(Gradients, Vec<Array2<f64>>), NetworkError> {
    let b_count = samples.len();
    assert_eq!(batch.per_sample.len(), b_count);
    assert_eq!(d_outputs.len(), b_count);
    let mut grads = Gradients::zeros_like(model);

    // Head backward per sample down to the GAP input.
    let mut d_xs: Vec<Array2<f64>> = Vec::with_capacity(b_count);
    for (s, sample) in samples.iter().enumerate() {
        let cache = &batch.per_sample[s];
        let d_output = d_outputs[s];
        grads.fc2_bias[0] += d_output;
        for (i, g) in grads.fc2_weight.column_mut(0).iter_mut().enumerate() {
            *g += d_output * cache.fc1_post[i];
        }
        let mut d_fc1_post: Array1<f64> = model.fc2.weight.column(0).mapv(|w| w * d_output);
        for (i, g) in d_fc1_post.iter_mut().enumerate() {
            if cache.fc1_pre[i] <= 0.0 {
                *g = 0.0;
            }
        }
        grads.fc1_bias += &d_fc1_post;
        for i in 0..model.fc1.weight.nrows() {
            for j in 0..model.fc1.weight.ncols() {
                grads.fc1_weight[(i, j)] += cache.gap_out[i] * d_fc1_post[j];
            }
        }
        let d_gap = model.fc1.weight.dot(&d_fc1_post);
        let gap_lvl = &sample.hierarchy.levels[cache.gap_level];
        let f_last = d_gap.len();
        let mut d_x = Array2::zeros((gap_lvl.padded_n(), f_last));
        let inv_n = 1.0 / gap_lvl.n_real as f64;
        for (slot, &is_real) in gap_lvl.real.iter().enumerate() {
            if is_real {
                for c in 0..f_last {
                    d_x[(slot, c)] = d_gap[c] * inv_n;
                }
            }
        }
        d_xs.push(d_x);
    }

    // Blocks in reverse, layer-synchronized.
    let mut pool_idx: Vec<usize> =
        batch.per_sample.iter().map(|c| c.pool_argmax.len()).collect();
    for (b, block) in model.blocks.iter().enumerate().rev() {
        // Pooling and ReLU per sample.
        for (s, _) in samples.iter().enumerate() {
            let cache = &batch.per_sample[s];
            for _ in 0..block.pool_stages {
                pool_idx[s] -= 1;
                d_xs[s] = pool_backward(d_xs[s].view(), &cache.pool_argmax[pool_idx[s]]);
                if faults.pool_backward_sign_flip && pool_idx[s] == 0 {
                    d_xs[s].mapv_inplace(|v| -v);
                }
            }
            let bc = &cache.block_caches[b];
            ndarray::Zip::from(&mut d_xs[s]).and(&bc.relu_out).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        // Joint batch-norm backward.
        let f = block.conv.f_out();
        let mut sum_dy = Array1::<f64>::zeros(f);
        let mut sum_dy_xhat = Array1::<f64>::zeros(f);
        let mut total = 0usize;
        for (s, sample) in samples.iter().enumerate() {
            let bc = &batch.per_sample[s].block_caches[b];
            let lvl = &sample.hierarchy.levels[bc.level];
            total += lvl.n_real;
            for (slot, &is_real) in lvl.real.iter().enumerate() {
                if is_real {
                    for c in 0..f {
                        let g = d_xs[s][(slot, c)];
                        sum_dy[c] += g;
                        sum_dy_xhat[c] += g * bc.bn.xhat[(slot, c)];
                    }
                }
            }
        }
        let block_grads = &mut grads.blocks[b];
        block_grads.gamma.assign(&sum_dy_xhat);
        block_grads.beta.assign(&sum_dy);
        let n = total as f64;
        let bn_mode = batch.per_sample[0].bn_mode;
        for (s, sample) in samples.iter().enumerate() {
            let bc = &batch.per_sample[s].block_caches[b];
            let lvl = &sample.hierarchy.levels[bc.level];
            let mut d_z = Array2::zeros(d_xs[s].raw_dim());
            match bn_mode {
                BnMode::Batch => {
                    for (slot, &is_real) in lvl.real.iter().enumerate() {
                        if is_real {
                            for c in 0..f {
                                let term = d_xs[s][(slot, c)]
                                    - sum_dy[c] / n
                                    - bc.bn.xhat[(slot, c)] * sum_dy_xhat[c] / n;
                                d_z[(slot, c)] = block.bn.gamma[c] * bc.bn.inv_std[c] * term;
                            }
                        }
                    }
                }
                BnMode::Running => {
                    // Running statistics are constants; the map is affine.
                    for (slot, &is_real) in lvl.real.iter().enumerate() {
                        if is_real {
                            for c in 0..f {
                                d_z[(slot, c)] =
                                    block.bn.gamma[c] * bc.bn.inv_std[c] * d_xs[s][(slot, c)];
                            }
                        }
                    }
                }
            }
            // Chebyshev conv backward.
            let scaled = lvl.op.scaled().expect("hierarchy levels carry lambda_max");
            let (g_theta, g_x) = cheb_conv_backward(d_z.view(), &bc.cheb, &scaled, &block.conv)?;
            block_grads.theta += &g_theta;
            d_xs[s] = g_x;
        }
    }

    Ok((grads, d_xs))
}

/// Single-sample backward: a batch of one.
pub fn backward(
    model: &Model,
    sample: &MeshSample,
    cache: ForwardCache,
    d_output: f64,
) -> Result<(Gradients, Array2<f64>), NetworkError> {
    let batch = BatchCaches { per_sample: vec![cache], bn_moments: Vec::new() };
    let (grads, mut d_xs) = backward_batch(model, &[sample], &batch, &[d_output])?;
    Ok((grads, d_xs.pop().unwrap()))
}

/// Task loss on the scalar output. Classification uses binary cross-entropy
/// with logits in the overflow-safe form; regression uses squared error.
pub fn loss(output: f64, target: &Target) -> Result<f64, NetworkError> {
    if !output.is_finite() {
        return Err(NetworkError::NonFinite { context: "model output" });
    }
    let l = match target {
        Target::Label(y) => {
            let z = output;
            let y = *y as f64;
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        }
        Target::Value(t) => {
            let d = output - t;
            d * d
        }
    };
    if !l.is_finite() {
        return Err(NetworkError::NonFinite { context: "loss" });
    }
    Ok(l)
}

/// d loss / d output.
pub fn loss_grad(output: f64, target: &Target) -> f64 {
    match target {
        Target::Label(y) => sigmoid(output) - *y as f64,
        Target::Value(t) => 2.0 * (output - t),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient of the class score `y^c` with respect to the final conv block's
/// activations (the GAP input), in padded indexing with zeros at fake slots.
/// For the single-logit head the positive class score is the logit and the
/// negative class its negation.
pub fn head_input_gradient(
    model: &Model,
    sample: &MeshSample,
    cache: &ForwardCache,
    class: usize,
) -> Array2<f64> {
    let sign = if class == 1 { 1.0 } else { -1.0 };
    let mut d_fc1_post: Array1<f64> = model.fc2.weight.column(0).mapv(|w| w * sign);
    for (i, g) in d_fc1_post.iter_mut().enumerate() {
        if cache.fc1_pre[i] <= 0.0 {
            *g = 0.0;
        }
    }
    let d_gap = model.fc1.weight.dot(&d_fc1_post);
    let gap_lvl = &sample.hierarchy.levels[cache.gap_level];
    let f = d_gap.len();
    let inv_n = 1.0 / gap_lvl.n_real as f64;
    let mut d_x = Array2::zeros((gap_lvl.padded_n(), f));
    for (slot, &is_real) in gap_lvl.real.iter().enumerate() {
        if is_real {
            for c in 0..f {
                d_x[(slot, c)] = d_gap[c] * inv_n;
            }
        }
    }
    d_x
}
