//! Loss functions, Adam, k-fold splitting and the early-stopping training
//! loop.

mod adam;
mod kfold;
mod loss;

pub use adam::{adam_step, AdamState};
pub use kfold::{holdout_split, kfold_split, FoldSplit};
pub use loss::{
    binary_cross_entropy_with_logits, cross_entropy_loss, loss_from_logits, one_hot, PROB_FLOOR,
};

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{CheckpointMeta, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0)
            || self.beta1 >= 1.0
            || self.beta2 >= 1.0
        {
            return Err(Error::Config(
                "learning rate, betas and epsilon must be positive, betas below 1".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, epochs and patience must be >= 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Whether a model head can be trained on a dataset: input channels must
/// agree, and a single-logit head pairs with two-label data.
pub fn check_compatible(model: &ModelConfig, data: &DatasetManifest) -> Result<()> {
    if model.in_channels != data.in_channels {
        return Err(Error::ConfigMismatch(format!(
            "model takes {} input channels, dataset has {}",
            model.in_channels, data.in_channels
        )));
    }
    let ok =
        model.num_classes == data.num_classes || (model.num_classes == 1 && data.num_classes == 2);
    if !ok {
        return Err(Error::ConfigMismatch(format!(
            "model head has {} classes, dataset has {} labels",
            model.num_classes, data.num_classes
        )));
    }
    Ok(())
}

/// Number of model output channels to use for a dataset with `labels`
/// distinct label values.
pub fn head_classes(labels: usize) -> usize {
    if labels == 2 {
        1
    } else {
        labels
    }
}

/// Outcome of observing one epoch's validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and the number of epochs since it last
/// strictly improved.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_jaccard: f64,
    pub val_dice: f64,
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_COLUMNS: [&str; 6] = [
    "fold",
    "epoch",
    "train_loss",
    "val_loss",
    "val_jaccard",
    "val_dice",
];

/// Formats `x` with six significant digits in plain decimal notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (5 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

/// `x` as it reads back after a round trip through [`format_sig6`].
pub fn round_sig6(x: f64) -> f64 {
    format_sig6(x).parse().unwrap_or(x)
}

impl History {
    /// Row with the smallest validation loss, first one on ties.
    pub fn best_row(&self) -> Option<&HistoryRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&HistoryRow>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HISTORY_COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.fold.to_string(),
                r.epoch.to_string(),
                format_sig6(r.train_loss),
                format_sig6(r.val_loss),
                format_sig6(r.val_jaccard),
                format_sig6(r.val_dice),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != HISTORY_COLUMNS {
            return Err(Error::format(
                path,
                format!("unexpected header {headers:?}"),
            ));
        }
        let rows = r.deserialize().collect::<Result<Vec<HistoryRow>, _>>()?;
        Ok(History { rows })
    }
}

/// Result of [`train`]: the best-epoch weights and the full history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub history: History,
}

/// [`train_with`] without a per-epoch observer.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, fold, |_| {
        ControlFlow::Continue(())
    })
}

/// Mini-batch Adam training with early stopping on validation loss.
///
/// Each epoch shuffles the training set with a generator seeded from
/// `cfg.seed`, steps through it in batches of `cfg.batch_size`, then
/// evaluates loss, Jaccard and Dice on `val_set`. Training stops after
/// `cfg.patience` epochs without improvement, after `cfg.max_epochs`, or
/// when `on_epoch` breaks. The returned model carries the weights of the
/// epoch with the lowest validation loss.
pub fn train_with(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    fold: usize,
    mut on_epoch: impl FnMut(&HistoryRow) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract(
            "training and validation sets must be non-empty".into(),
        ));
    }
    check_compatible(model.config(), &train_set.manifest)?;
    check_compatible(model.config(), &val_set.manifest)?;

    let classes = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = History::default();
    let mut best = (
        model.clone(),
        CheckpointMeta {
            epoch: 0,
            metric: f64::INFINITY,
        },
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, masks) = train_set.batch(chunk)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let x = tape.leaf(images);
                let trace = model.forward_on_tape(&mut tape, x)?;
                let l = if classes == 1 {
                    tape.sigmoid_bce(trace.logits, &masks)?
                } else {
                    tape.softmax_cross_entropy(trace.logits, &one_hot(&masks, classes)?)?
                };
                let loss = tape.value(l).data()[0] as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                (loss, tape.backward(l)?.into_params())
            };
            let grad_slices: Vec<&[f32]> = grads
                .iter()
                .flat_map(|g| [g.kernel.data(), g.bias.as_slice()])
                .collect();
            adam_step(&mut model.param_slices_mut(), &grad_slices, &mut adam, cfg)?;
            loss_sum += loss * chunk.len() as f64;
        }

        let val = evaluate(&model, val_set, cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let row = HistoryRow {
            fold,
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_jaccard: val.jaccard,
            val_dice: val.dice,
        };
        let flow = on_epoch(&row);
        history.rows.push(row);
        match stopper.observe(val.loss) {
            StopDecision::Improved => {
                best = (
                    model.clone(),
                    CheckpointMeta {
                        epoch,
                        metric: val.loss,
                    },
                );
            }
            StopDecision::Stop => break,
            StopDecision::Continue => {}
        }
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        meta: best.1,
        history,
    })
}
