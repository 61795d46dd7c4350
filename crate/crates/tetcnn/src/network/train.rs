//! Cross-validated training: stratified fold assignment, per-fold validation
//! split, gradient accumulation over mini-batches of whole meshes, Adam, and
//! best-validation-loss checkpoint selection.

use rand::seq::SliceRandom;

use super::{
    adam_step, apply_bn_updates, backward_batch, build_model, forward, forward_batch, loss,
    loss_grad, summarize_folds, AdamConfig, AdamState, BnMode, ClassCounts, EvalMetrics,
    MeshSample, MetricSummary, Model, ModelConfig, NetworkError, Target, Task,
};
use crate::lbo::{Lumping, OperatorKind};
use crate::rng::{stream, subseed, Purpose};

/// Training protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub order: usize,
    pub operator: OperatorKind,
    pub lumping: Lumping,
    pub widths: Vec<usize>,
    pub fc_hidden: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn standard(task: Task, order: usize, seed: u64) -> Self {
        TrainConfig {
            task,
            epochs: 150,
            batch_size: 8,
            folds: 10,
            val_fraction: 0.15,
            seed,
            order,
            operator: OperatorKind::Lbo,
            lumping: Lumping::FemQuarter,
            widths: super::DEFAULT_WIDTHS.to_vec(),
            fc_hidden: super::DEFAULT_FC_HIDDEN,
            adam: AdamConfig::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            order: self.order,
            in_features: 3,
            widths: self.widths.clone(),
            fc_hidden: self.fc_hidden,
            operator: self.operator,
            lumping: self.lumping,
        }
    }

    fn validate(&self) {
        assert!(self.epochs > 0 && self.batch_size > 0 && self.folds >= 2);
        assert!(self.val_fraction > 0.0 && self.val_fraction < 1.0);
        assert!(!self.widths.is_empty());
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of one fold: the best-validation model and its test metrics.
#[derive(Debug)]
pub struct FoldOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub metrics: EvalMetrics,
    pub test_indices: Vec<usize>,
}

/// Full cross-validation result.
#[derive(Debug)]
pub struct TrainOutcome {
    pub folds: Vec<FoldOutcome>,
    pub records: Vec<EpochRecord>,
    pub summary: Vec<(&'static str, MetricSummary)>,
}

/// Assign samples to `folds` folds. Classification is stratified per class
/// (round-robin after a seeded in-class shuffle), keeping class ratios within
/// one sample across folds; regression shuffles plainly.
pub fn fold_split(targets: &[Target], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); folds];
    let classify = matches!(targets.first(), Some(Target::Label(_)));
    if classify {
        for class in [1u8, 0u8] {
            let mut idx: Vec<usize> = targets
                .iter()
                .enumerate()
                .filter(|(_, t)| matches!(t, Target::Label(c) if *c == class))
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut stream(seed, Purpose::Folds, class as u64));
            for (pos, sample) in idx.into_iter().enumerate() {
                out[pos % folds].push(sample);
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..targets.len()).collect();
        idx.shuffle(&mut stream(seed, Purpose::Folds, 0));
        for (pos, sample) in idx.into_iter().enumerate() {
            out[pos % folds].push(sample);
        }
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    out
}

/// Split a fold's training indices into (train, validation), holding out
/// `val_fraction` (stratified for classification, at least one sample).
pub fn validation_split(
    indices: &[usize],
    targets: &[Target],
    val_fraction: f64,
    seed: u64,
    fold: usize,
) -> (Vec<usize>, Vec<usize>) {
    let classify = matches!(targets.first(), Some(Target::Label(_)));
    let mut train = Vec::new();
    let mut val = Vec::new();
    let groups: Vec<Vec<usize>> = if classify {
        [1u8, 0u8]
            .iter()
            .map(|&class| {
                indices
                    .iter()
                    .copied()
                    .filter(|&i| matches!(targets[i], Target::Label(c) if c == class))
                    .collect()
            })
            .collect()
    } else {
        vec![indices.to_vec()]
    };
    for (g, mut group) in groups.into_iter().enumerate() {
        group.shuffle(&mut stream(
            seed,
            Purpose::Folds,
            0x1000 + (fold as u64) * 8 + g as u64,
        ));
        let n_val = ((group.len() as f64 * val_fraction).round() as usize)
            .max(1)
            .min(group.len().saturating_sub(1).max(1));
        val.extend_from_slice(&group[..n_val]);
        train.extend_from_slice(&group[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// k-fold cross-validated training. Returns per-fold best models, the full
/// epoch log, and cross-fold metric summaries.
pub fn train(samples: &[MeshSample], config: &TrainConfig) -> Result<TrainOutcome, NetworkError> {
    config.validate();
    let targets: Vec<Target> = samples.iter().map(|s| s.target).collect();
    let fold_sets = fold_split(&targets, config.folds, config.seed);
    let mut outcomes = Vec::with_capacity(config.folds);
    let mut records = Vec::new();
    for fold in 0..config.folds {
        let test_indices = fold_sets[fold].clone();
        let rest: Vec<usize> = (0..config.folds)
            .filter(|&f| f != fold)
            .flat_map(|f| fold_sets[f].iter().copied())
            .collect();
        let (train_idx, val_idx) =
            validation_split(&rest, &targets, config.val_fraction, config.seed, fold);
        let outcome = train_single_fold(
            samples,
            &train_idx,
            &val_idx,
            &test_indices,
            config,
            fold,
            &mut records,
        )?;
        outcomes.push(outcome);
    }
    let metrics: Vec<EvalMetrics> = outcomes.iter().map(|o| o.metrics).collect();
    let summary = summarize_folds(&metrics);
    Ok(TrainOutcome { folds: outcomes, records, summary })
}

fn train_single_fold(
    samples: &[MeshSample],
    train_idx: &[usize],
    val_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
    fold: usize,
    records: &mut Vec<EpochRecord>,
) -> Result<FoldOutcome, NetworkError> {
    let model_config = config.model_config();
    let mut model = build_model(&model_config, subseed(config.seed, Purpose::Init, fold as u64));
    let mut adam = AdamState::new(&model);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(
            config.seed,
            Purpose::Folds,
            0x2000 + (fold as u64) * 100_000 + epoch as u64,
        ));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_samples: Vec<&MeshSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = forward_batch(&model, &batch_samples, BnMode::Batch)?;
            let inv = 1.0 / chunk.len() as f64;
            let mut d_outputs = Vec::with_capacity(chunk.len());
            for (cache, sample) in batch.per_sample.iter().zip(&batch_samples) {
                epoch_loss += loss(cache.output, &sample.target)?;
                d_outputs.push(loss_grad(cache.output, &sample.target) * inv);
            }
            let (grads, _) = backward_batch(&model, &batch_samples, &batch, &d_outputs)?;
            apply_bn_updates(&mut model, &batch);
            adam_step(&mut model, &grads, &mut adam, &config.adam)?;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let val_loss = mean_loss(&model, samples, val_idx)?;
        records.push(EpochRecord { fold, epoch, train_loss, val_loss });
        let improved = match &best {
            None => true,
            Some((best_loss, _, _)) => val_loss < *best_loss,
        };
        if improved {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let (metrics, _) = evaluate(&best_model, samples, test_idx)?;
    Ok(FoldOutcome { model: best_model, best_epoch, metrics, test_indices: test_idx.to_vec() })
}

fn mean_loss(model: &Model, samples: &[MeshSample], idx: &[usize]) -> Result<f64, NetworkError> {
    let mut total = 0.0;
    for &i in idx {
        let cache = forward(model, &samples[i], BnMode::Running)?;
        total += loss(cache.output, &samples[i].target)?;
    }
    Ok(total / idx.len() as f64)
}

/// Deterministic inference over a sample subset: running-stats BN, sigmoid
/// threshold 0.5 for classification. Returns metrics and raw outputs.
pub fn evaluate(
    model: &Model,
    samples: &[MeshSample],
    idx: &[usize],
) -> Result<(EvalMetrics, Vec<f64>), NetworkError> {
    let mut outputs = Vec::with_capacity(idx.len());
    match model.config.task {
        Task::Classify => {
            let mut counts = ClassCounts::default();
            for &i in idx {
                let cache = forward(model, &samples[i], BnMode::Running)?;
                outputs.push(cache.output);
                let predicted = u8::from(super::sigmoid(cache.output) >= 0.5);
                let Target::Label(actual) = samples[i].target else {
                    panic!("classification task with non-label target")
                };
                counts.record(predicted, actual);
            }
            Ok((
                EvalMetrics::Classification {
                    acc: counts.accuracy(),
                    sen: counts.sensitivity(),
                    spe: counts.specificity(),
                },
                outputs,
            ))
        }
        Task::Regress => {
            let mut sq = 0.0;
            for &i in idx {
                let cache = forward(model, &samples[i], BnMode::Running)?;
                outputs.push(cache.output);
                let Target::Value(t) = samples[i].target else {
                    panic!("regression task with non-value target")
                };
                let d = cache.output - t;
                sq += d * d;
            }
            Ok((EvalMetrics::Regression { rmse: (sq / idx.len() as f64).sqrt() }, outputs))
        }
    }
}
