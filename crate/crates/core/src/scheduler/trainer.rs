//! Training step, mixed sampler and the epoch loop.
//!
//! An epoch runs the sampler over the union of training splits. Each round
//! draws up to `B` samples from every dataset, shuffles them together, adapts
//! them and diverts them into the caches; after every round the consumer
//! trains on ready batches until none is left. Leftovers stay cached for the
//! next epoch. In threaded mode a producer thread does the loading,
//! augmentation and adaptation and hands whole rounds to the consumer through
//! a bounded channel, so both modes see the same push sequence and emit the
//! same batches.

use std::sync::mpsc;

use indexmap::IndexMap;

use super::adapter::{AdaptedSample, CollationAdapter, RawSample};
use super::cache::{Batch, EngineState};
use super::lr::LrSchedule;
use crate::data::{augment, AugmentationConfig, Dataset, DatasetId, Split};
use crate::error::{config_err, Error, Result};
use crate::head::Mode;
use crate::loss::{apply_lossrate, compute_weights, weighted_bce, AttributeWeights, LossRates};
use crate::model::ModelState;
use crate::numerics::{AdamW, AdamWConfig, BatchStats, Graph, ParamId, RngState, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    /// Positional, one per registered dataset.
    pub loss_rates: Vec<f64>,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub threaded: bool,
}

/// Gradients of one batch, already accumulated into the parameter store.
#[derive(Debug, Clone)]
pub struct StepGrads {
    /// Weighted BCE before the loss rate.
    pub loss: Scalar,
    /// After the loss rate; this is what was differentiated.
    pub scaled_loss: Scalar,
    /// Parameters the batch's graph touched, sorted.
    pub active: Vec<ParamId>,
    pub stats: BatchStats,
}

/// Forward and backward pass for one single-source batch. Gradients are
/// zeroed first.
pub fn backward_batch(
    model: &mut ModelState,
    batch: &Batch<AdaptedSample>,
    weights: &AttributeWeights,
    rates: &LossRates,
) -> Result<StepGrads> {
    batch.check_pure()?;
    if weights.dataset_id != batch.source_id {
        return Err(Error::Contract(format!(
            "weights of {} used for a {} batch",
            weights.dataset_id, batch.source_id
        )));
    }
    let c = model.query_set(&batch.source_id)?.count;
    let mut labels = Vec::with_capacity(batch.samples.len() * c);
    let mut mask = Vec::with_capacity(batch.samples.len() * c);
    for s in &batch.samples {
        labels.extend(s.labels_padded[..c].iter().map(|&v| v as Scalar));
        mask.extend(s.mask[..c].iter().map(|&v| v as Scalar));
    }
    let frames: Vec<_> = batch.samples.iter().map(|s| &s.frames).collect();
    let mut g = Graph::new();
    let pred = model.forward(&mut g, &frames, &batch.source_id, Mode::Train)?;
    let loss = weighted_bce(&mut g, pred.probs, &labels, &mask, weights)?;
    let scaled = apply_lossrate(&mut g, loss, &batch.source_id, rates)?;
    let (loss_v, scaled_v) = (g.value(loss).data()[0], g.value(scaled).data()[0]);
    if !scaled_v.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {scaled_v} on a {} batch",
            batch.source_id
        )));
    }
    model.store.zero_grads();
    g.backward(scaled, &mut model.store)?;
    Ok(StepGrads {
        loss: loss_v,
        scaled_loss: scaled_v,
        active: g.param_ids(),
        stats: pred.stats.expect("training-mode prediction carries statistics"),
    })
}

/// One optimizer iteration on a single-source batch.
pub fn train_step(
    model: &mut ModelState,
    opt: &mut AdamW,
    batch: &Batch<AdaptedSample>,
    weights: &AttributeWeights,
    rates: &LossRates,
    lr: f64,
) -> Result<StepGrads> {
    let grads = backward_batch(model, batch, weights, rates)?;
    opt.step_active(&mut model.store, lr, &grads.active)?;
    let head = model
        .heads
        .get(&batch.source_id)
        .ok_or_else(|| Error::Routing(format!("no head for {}", batch.source_id)))?
        .clone();
    head.commit_running_stats(&mut model.store, &grads.stats)?;
    Ok(grads)
}

/// Sampler rounds for one epoch: each entry is `(dataset index, record
/// index into that dataset's training split)`.
pub fn epoch_rounds(seed: u64, epoch: usize, sizes: &[usize], batch_size: usize) -> Vec<Vec<(usize, usize)>> {
    let base = RngState::new(seed).fork_str("sampler").fork(epoch as u64);
    let perms: Vec<Vec<usize>> = sizes
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let mut p: Vec<usize> = (0..n).collect();
            base.fork(d as u64).shuffle(&mut p);
            p
        })
        .collect();
    let longest = sizes.iter().copied().max().unwrap_or(0);
    let rounds = longest.div_ceil(batch_size);
    (0..rounds)
        .map(|r| {
            let mut draw: Vec<(usize, usize)> = perms
                .iter()
                .enumerate()
                .flat_map(|(d, p)| {
                    let lo = (r * batch_size).min(p.len());
                    let hi = ((r + 1) * batch_size).min(p.len());
                    p[lo..hi].iter().map(move |&i| (d, i))
                })
                .collect();
            base.fork_str("mix").fork(r as u64).shuffle(&mut draw);
            draw
        })
        .collect()
}

/// One trained batch, for logs and determinism checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub source_id: DatasetId,
    pub origin_uids: Vec<u64>,
    pub loss: Scalar,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    /// Mean unscaled loss per dataset over this epoch's batches.
    pub dataset_loss: IndexMap<DatasetId, Option<f64>>,
    pub last_lr: f64,
}

impl EpochSummary {
    pub fn mean_loss(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::NAN;
        }
        self.steps.iter().map(|s| s.loss as f64).sum::<f64>() / self.steps.len() as f64
    }
}

pub struct Trainer {
    pub model: ModelState,
    pub opt: AdamW,
    pub schedule: LrSchedule,
    pub rates: LossRates,
    pub weights: IndexMap<DatasetId, AttributeWeights>,
    pub engine: EngineState<AdaptedSample>,
    pub datasets: Vec<Dataset>,
    pub options: TrainOptions,
    /// Completed epochs.
    pub epoch: usize,
    adapter: CollationAdapter,
    train_index: Vec<Vec<usize>>,
}

impl Trainer {
    /// `datasets` must follow the model's registration order.
    pub fn new(model: ModelState, datasets: Vec<Dataset>, options: TrainOptions) -> Result<Self> {
        let ids = model.dataset_ids();
        let given: Vec<DatasetId> = datasets.iter().map(|d| d.spec.dataset_id.clone()).collect();
        if ids != given {
            return Err(config_err!("datasets {given:?} do not match the model registration {ids:?}"));
        }
        for (d, s) in datasets.iter().zip(&model.datasets) {
            if d.spec.attribute_count() != s.attribute_count() || d.spec.modality != s.modality {
                return Err(Error::Incompatible(format!(
                    "dataset {} on disk does not match the model's registration",
                    s.dataset_id
                )));
            }
        }
        if options.batch_size < 2 {
            return Err(config_err!("batch size {} is below 2", options.batch_size));
        }
        let rates = LossRates::positional(&ids, &options.loss_rates)?;
        let weights = datasets
            .iter()
            .map(|d| Ok((d.spec.dataset_id.clone(), compute_weights(&d.spec.dataset_id, &d.spec.positive_rates)?)))
            .collect::<Result<IndexMap<_, _>>>()?;
        let train_index: Vec<Vec<usize>> = datasets
            .iter()
            .map(|d| {
                d.records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.split == Split::Train)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let steps_per_epoch: usize = train_index.iter().map(|t| t.len() / options.batch_size).sum();
        if steps_per_epoch == 0 {
            return Err(config_err!(
                "no dataset has a full batch of {} training samples",
                options.batch_size
            ));
        }
        let schedule = LrSchedule {
            base_lr: options.base_lr,
            warmup_epochs: options.warmup_epochs,
            total_epochs: options.epochs,
            steps_per_epoch,
        };
        Ok(Self {
            opt: AdamW::new(&model.store, options.adamw),
            engine: EngineState::new(&ids, options.batch_size)?,
            adapter: CollationAdapter::new(&model.datasets),
            model,
            schedule,
            rates,
            weights,
            datasets,
            options,
            epoch: 0,
            train_index,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.engine.step_counter
    }

    fn load_round(
        datasets: &[Dataset],
        train_index: &[Vec<usize>],
        aug: &AugmentationConfig,
        seed: u64,
        epoch: usize,
        round: &[(usize, usize)],
    ) -> Result<Vec<RawSample>> {
        let rng = RngState::new(seed).fork_str("augment").fork(epoch as u64);
        round
            .iter()
            .map(|&(d, i)| {
                let ds = &datasets[d];
                let rec = &ds.records[train_index[d][i]];
                let frames = ds.frames(rec)?;
                let mut r = rng.fork(d as u64).fork(rec.sample_uid);
                Ok(RawSample {
                    source_id: ds.spec.dataset_id.clone(),
                    frames: augment(&frames, aug, &mut r)?,
                    labels: rec.labels.clone(),
                    origin_uid: rec.sample_uid,
                })
            })
            .collect()
    }

    /// Runs one epoch of training.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let sizes: Vec<usize> = self.train_index.iter().map(Vec::len).collect();
        let rounds = epoch_rounds(self.options.seed, epoch, &sizes, self.options.batch_size);
        self.engine.begin_epoch();
        let mut steps = Vec::new();
        let Self {
            model,
            opt,
            schedule,
            rates,
            weights,
            engine,
            datasets,
            options,
            adapter,
            train_index,
            ..
        } = self;
        let mut consume = |chunk: Vec<AdaptedSample>, steps: &mut Vec<StepRecord>| -> Result<()> {
            engine.divert(chunk)?;
            while let Some(batch) = engine.poll_ready() {
                let step = engine.step_counter;
                let lr = schedule.lr(step as usize);
                let w = &weights[&batch.source_id];
                let out = train_step(model, opt, &batch, w, rates, lr)?;
                engine.record_trained(&batch);
                steps.push(StepRecord {
                    step,
                    source_id: batch.source_id.clone(),
                    origin_uids: batch.samples.iter().map(|s| s.origin_uid).collect(),
                    loss: out.loss,
                    lr,
                });
            }
            Ok(())
        };
        if options.threaded {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<AdaptedSample>>>(2);
            let (ds, ti, aug, seed) = (&*datasets, &*train_index, &options.augmentation, options.seed);
            std::thread::scope(|scope| -> Result<()> {
                scope.spawn(move || {
                    for round in &rounds {
                        let chunk = Self::load_round(ds, ti, aug, seed, epoch, round)
                            .and_then(|raw| adapter.adapt(raw));
                        let failed = chunk.is_err();
                        if tx.send(chunk).is_err() || failed {
                            break;
                        }
                    }
                });
                for chunk in rx {
                    consume(chunk?, &mut steps)?;
                }
                Ok(())
            })?;
        } else {
            for round in &rounds {
                let raw = Self::load_round(datasets, train_index, &options.augmentation, options.seed, epoch, round)?;
                consume(adapter.adapt(raw)?, &mut steps)?;
            }
        }
        let dataset_loss = self
            .model
            .dataset_ids()
            .into_iter()
            .map(|id| {
                let l: Vec<f64> = steps
                    .iter()
                    .filter(|s| s.source_id == id)
                    .map(|s| s.loss as f64)
                    .collect();
                let mean = (!l.is_empty()).then(|| l.iter().sum::<f64>() / l.len() as f64);
                (id, mean)
            })
            .collect();
        self.epoch += 1;
        Ok(EpochSummary {
            epoch,
            last_lr: steps.last().map_or(0.0, |s| s.lr),
            steps,
            dataset_loss,
        })
    }
}
