//! Mini-batch Adam training with a reproducible, resumable schedule.
//!
//! The visiting order of epoch `e` is a shuffle seeded by
//! `derive_seed(seed, SHUFFLE_STREAM + e)`, so the whole run is determined by
//! the config, the dataset and the `(epoch, batch_in_epoch)` counters. A
//! resumed trainer therefore continues bit-for-bit.

use alloc::format;
use alloc::vec::Vec;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::graph::Fault;
use crate::model::FcNet;
use crate::rng::{derive_seed, RngStream};
use crate::synthdata::Sample;

const SHUFFLE_STREAM: u64 = 0x5_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub epoch: usize,
    pub batch: usize,
    /// Mean BCE over the batch.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FcNet,
    pub adam: Adam,
    /// Zero-based epoch currently being trained.
    pub epoch: usize,
    /// Batches of `epoch` already applied.
    pub batch_in_epoch: usize,
    pub fault: Option<Fault>,
}

impl Trainer {
    pub fn new(model: FcNet) -> Self {
        let adam = Adam::new(model.config.lr);
        Self {
            model,
            adam,
            epoch: 0,
            batch_in_epoch: 0,
            fault: None,
        }
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.model.config.batch_size)
    }

    /// Seed of the shuffle stream for `epoch`.
    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.model.config.seed, SHUFFLE_STREAM + epoch as u64)
    }

    /// Sample order for one epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(self.shuffle_seed(epoch)).shuffle(&mut order);
        order
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.model.config.epochs
    }

    /// Apply the next batch and advance the counters.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::InvalidData("training set is empty".into()));
        }
        let bs = self.model.config.batch_size;
        let order = self.epoch_order(self.epoch, data.len());
        let start = self.batch_in_epoch * bs;
        let batch = &order[start..(start + bs).min(data.len())];

        let mut total = self.model.params.zero_grads();
        let mut loss_sum = 0.0;
        for &i in batch {
            let s = &data[i];
            let (loss, grads) = self
                .model
                .loss_and_grads(&s.image, &s.expression, &s.mask, self.fault)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {} batch {} (sample seed {:#x})",
                    self.epoch, self.batch_in_epoch, s.seed
                )));
            }
            loss_sum += loss;
            total.accumulate(&grads);
        }
        total.scale(1.0 / batch.len() as f64);
        let grad_norm = total.norm();
        let lr = self.model.config.lr_at_epoch(self.epoch);
        self.adam.lr = lr;
        self.adam.step(&mut self.model.params, &total)?;

        let stats = StepStats {
            epoch: self.epoch,
            batch: self.batch_in_epoch,
            loss: loss_sum / batch.len() as f64,
            lr,
            grad_norm,
        };
        self.batch_in_epoch += 1;
        if self.batch_in_epoch >= self.batches_per_epoch(data.len()) {
            self.batch_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(stats)
    }

    /// Finish the current epoch, reporting each step.
    pub fn train_epoch<F: FnMut(&StepStats)>(&mut self, data: &[Sample], mut on_step: F) -> Result<EpochStats> {
        let epoch = self.epoch;
        let lr = self.model.config.lr_at_epoch(epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        while self.epoch == epoch {
            let s = self.step(data)?;
            on_step(&s);
            sum += s.loss;
            count += 1;
        }
        Ok(EpochStats {
            epoch,
            mean_loss: sum / count as f64,
            lr,
        })
    }
}
