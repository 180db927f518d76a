//! Class-balanced mini-batch training with Adam and the stream-kernel L2
//! penalty, plus batched inference over pair lists.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::model::{similarity_score, ArchitectureSpec, Mode, Model, ModelError};
use crate::optim::{adam_step, l2_penalty, AdamConfig, AdamState, OptimError};
use crate::patchpool::{center_crop, Label, PatchPair, PatchPool, PoolError};
use crate::rng::{stream_rng, RngStream};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("batch size {0} must be even and positive")]
    OddBatch(usize),
    #[error(
        "cannot fill one balanced batch of {batch}: {positives} positives, {negatives} negatives"
    )]
    Unfillable {
        batch: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("pool patches are {pool}px, smaller than the requested {requested}px")]
    PatchTooLarge { pool: usize, requested: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per batch, half positive and half negative.
    pub batch_size: usize,
    pub l2_lambda: f64,
    /// Probability of zeroing an fc1 activation.
    pub dropout_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Pairs per forward pass during validation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            l2_lambda: 0.001,
            dropout_rate: 0.7,
            seed: 0,
            adam: AdamConfig::default(),
            eval_chunk: 64,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean objective (cross-entropy plus L2) over the epoch's batches.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_ms: u128,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy,wall_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.epoch, r.train_loss, r.val_accuracy, r.wall_ms
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub cross_entropy: f64,
    pub l2: f64,
}

impl StepStats {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.l2
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the highest validation accuracy (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Shuffles positives and negatives independently and zips them into
/// batches of `batch_size / 2` each; a trailing partial batch is dropped.
/// Returns indices into `pairs`.
pub fn balanced_batches<R: Rng + ?Sized>(
    pairs: &[PatchPair],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(TrainError::OddBatch(batch_size));
    }
    let half = batch_size / 2;
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..pairs.len()).partition(|&i| pairs[i].label.is_similar());
    if pos.len() < half || neg.len() < half {
        return Err(TrainError::Unfillable {
            batch: batch_size,
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    Ok(pos
        .chunks_exact(half)
        .zip(neg.chunks_exact(half))
        .map(|(p, n)| p.iter().chain(n).copied().collect())
        .collect())
}

/// SAR, optical and one-hot label tensors of one batch.
pub type Batch = (Tensor<f32>, Tensor<f32>, Tensor<f32>);

/// Stacks pairs into `[B,1,crop,crop]` SAR and optical tensors and a
/// `[B,2]` one-hot label tensor, center-cropping on the fly.
pub fn batch_tensors(pairs: &[&PatchPair], crop: usize) -> Result<Batch, TrainError> {
    let b = pairs.len();
    let mut sar = Vec::with_capacity(b * crop * crop);
    let mut opt = Vec::with_capacity(b * crop * crop);
    let mut labels = Vec::with_capacity(2 * b);
    for p in pairs {
        if p.size < crop {
            return Err(TrainError::PatchTooLarge {
                pool: p.size,
                requested: crop,
            });
        }
        sar.extend(center_crop(&p.sar, p.size, crop)?);
        opt.extend(center_crop(&p.opt, p.size, crop)?);
        labels.extend(p.label.one_hot());
    }
    Ok((
        Tensor::new(&[b, 1, crop, crop], sar)?,
        Tensor::new(&[b, 1, crop, crop], opt)?,
        Tensor::new(&[b, 2], labels)?,
    ))
}

/// Forward, backward and one Adam update on a single batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng>(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    sar: &Tensor<f32>,
    opt: &Tensor<f32>,
    labels: &Tensor<f32>,
    l2_lambda: f64,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<StepStats, TrainError> {
    let step = adam.step + 1;
    let mut pass = model.forward(
        sar,
        opt,
        Mode::Train {
            dropout_rate,
            rng,
            step,
        },
    )?;
    let g = &mut pass.graph;
    let ce = g.cross_entropy(pass.probs, labels)?;
    let l2 = l2_penalty(g, l2_lambda)?;
    let loss = g.add(ce, l2)?;
    let stats = StepStats {
        cross_entropy: g.value(ce).data()[0] as f64,
        l2: g.value(l2).data()[0] as f64,
    };
    g.backward(loss)?;
    model.params.zero_grads();
    model.params.accumulate_grads(g)?;
    adam_step(&mut model.params, adam)?;
    Ok(stats)
}

/// Similarity scores (similar-class probability) for every pair.
pub fn score_pairs(
    model: &Model<f32>,
    pairs: &[PatchPair],
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    let crop = model.spec.patch_size;
    let mut scores = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let refs: Vec<&PatchPair> = part.iter().collect();
        let (sar, opt, _) = batch_tensors(&refs, crop)?;
        let probs = model.predict(&sar, &opt)?;
        scores.extend(similarity_score(&probs).into_iter().map(f64::from));
    }
    Ok(scores)
}

/// Overall accuracy at threshold 0.5 (score ≥ 0.5 predicts similar).
pub fn accuracy_at_half(scores: &[f64], pairs: &[PatchPair]) -> f64 {
    let correct = scores
        .iter()
        .zip(pairs)
        .filter(|(s, p)| (**s >= 0.5) == (p.label == Label::Similar))
        .count();
    correct as f64 / pairs.len().max(1) as f64
}

/// Trains a fresh network of layout `spec` on the pool's train split,
/// selecting the best epoch by validation accuracy. `on_epoch` sees each
/// log row as soon as it is produced.
pub fn train(
    pool: &PatchPool,
    spec: ArchitectureSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    if pool.train.is_empty() {
        return Err(TrainError::EmptyPartition("train"));
    }
    if pool.val.is_empty() {
        return Err(TrainError::EmptyPartition("val"));
    }
    if pool.patch_size < spec.patch_size {
        return Err(TrainError::PatchTooLarge {
            pool: pool.patch_size,
            requested: spec.patch_size,
        });
    }
    spec.validate()?;
    let mut init_rng = stream_rng(cfg.seed, RngStream::Init);
    let mut dropout_rng = stream_rng(cfg.seed, RngStream::Dropout);
    let mut shuffle_rng = stream_rng(cfg.seed, RngStream::Shuffle);
    let crop = spec.patch_size;
    let mut model = Model::<f32>::build(spec, &mut init_rng)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = balanced_batches(&pool.train, cfg.batch_size, &mut shuffle_rng)?;
        let mut loss_sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let refs: Vec<&PatchPair> = idx.iter().map(|&i| &pool.train[i]).collect();
            let (sar, opt, labels) = batch_tensors(&refs, crop)?;
            let stats = train_step(
                &mut model,
                &mut adam,
                &sar,
                &opt,
                &labels,
                cfg.l2_lambda,
                cfg.dropout_rate,
                &mut dropout_rng,
            )?;
            if !stats.total().is_finite() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            loss_sum += stats.total();
        }
        let scores = score_pairs(&model, &pool.val, cfg.eval_chunk)?;
        let val_accuracy = accuracy_at_half(&scores, &pool.val);
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_accuracy,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&row);
        metrics.push(row);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((
                val_accuracy,
                epoch,
                Checkpoint::new(model.clone(), Some(adam.clone())),
            ));
        }
    }
    let last = Checkpoint::new(model, Some(adam));
    let (best_epoch, best) = match best {
        Some((_, e, c)) => (e, c),
        None => (0, last.clone()),
    };
    Ok(TrainOutcome {
        last,
        best,
        best_epoch,
        metrics,
    })
}
