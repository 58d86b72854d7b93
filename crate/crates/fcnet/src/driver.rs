//! Training driver: epochs, validation, logging and checkpoints.

use std::path::PathBuf;
use std::time::Instant;

use fcnet_core::metrics::evaluate;
use fcnet_core::synthdata::Sample;
use fcnet_core::train::Trainer;
use log::{info, warn};

use crate::checkpoint;
use crate::error::FormatError;
use crate::tables::{write_training_log, EpochLog};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv`, `best.fcnt` and `final.fcnt`.
    pub out_dir: Option<PathBuf>,
    /// Stop once validation IoU reaches this value at an epoch end.
    pub early_stop_iou: Option<f64>,
    /// Log every n-th step (0 = only epoch summaries).
    pub log_every: usize,
    /// Stop at the first epoch end past this many seconds of wall time.
    pub max_seconds: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochLog>,
    pub best_iou: f64,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub timed_out: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training aborted at epoch {epoch}: {source}; last good checkpoint: {last_good:?}")]
    Aborted {
        epoch: usize,
        source: fcnet_core::Error,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] fcnet_core::Error),
}

/// Train until `config.epochs`, evaluating on `val` after each epoch.
///
/// `final.fcnt` is rewritten after every epoch, so when a step fails (for
/// example on a non-finite loss) it still holds the last good state.
pub fn run_training(
    mut trainer: Trainer,
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let paths = match &opts.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| FormatError::io(d, e))?;
            Some((d.join("final.fcnt"), d.join("best.fcnt"), d.join("metrics.csv")))
        }
        None => None,
    };
    if let Some((fin, _, _)) = &paths {
        checkpoint::save(fin, &trainer)?;
    }
    let start = Instant::now();
    let mut history: Vec<EpochLog> = Vec::new();
    let (mut best_iou, mut best_epoch, mut stopped_early, mut timed_out) = (f64::NEG_INFINITY, None, false, false);
    while !trainer.finished() {
        let epoch = trainer.epoch;
        let every = opts.log_every;
        let stats = trainer.train_epoch(train, |s| {
            if every > 0 && s.batch % every == 0 {
                info!(
                    "epoch {} batch {} loss {:.5} lr {:e} |g| {:.3e}",
                    s.epoch, s.batch, s.loss, s.lr, s.grad_norm
                );
            }
        });
        let stats = match stats {
            Ok(s) => s,
            Err(e) => {
                return Err(TrainError::Aborted {
                    epoch,
                    source: e,
                    last_good: paths.as_ref().map(|p| p.0.clone()),
                })
            }
        };
        let report = evaluate(&trainer.model, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: stats.mean_loss,
            val_mean_iou: report.mean_iou,
            val_precision: report.precision.iter().map(|&(_, p)| p).collect(),
            lr: stats.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch} train_loss {:.5} val_iou {:.4} pr50 {:.3} lr {:e} t {:.0}s",
            entry.train_loss, entry.val_mean_iou, entry.val_precision[0], entry.lr, entry.seconds
        );
        history.push(entry);
        let improved = report.mean_iou > best_iou;
        if improved {
            best_iou = report.mean_iou;
            best_epoch = Some(epoch);
        }
        if let Some((fin, best, csv)) = &paths {
            checkpoint::save(fin, &trainer)?;
            if improved {
                checkpoint::save(best, &trainer)?;
            }
            write_training_log(csv, &history)?;
        }
        if opts.early_stop_iou.is_some_and(|t| report.mean_iou >= t) {
            info!("validation IoU {:.4} reached the early-stop target", report.mean_iou);
            stopped_early = true;
            break;
        }
        if opts.max_seconds.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
            warn!("wall-time budget spent after epoch {epoch}");
            timed_out = true;
            break;
        }
    }
    if history.is_empty() {
        warn!("nothing to train: epoch counter already at {}", trainer.epoch);
    }
    Ok(TrainOutcome {
        trainer,
        history,
        best_iou,
        best_epoch,
        stopped_early,
        timed_out,
    })
}
