//! Optimization loop: batching, augmentation, loss assembly and Adam steps.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attr_text::{AttributeParser, NUM_ATTRIBUTES};
use crate::checkpoint;
use crate::data::{augment, AugmentConfig, ImageTextSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::losses::{
    attribute_loss_grad, coarse_loss_grad, self_training_loss_grad, total_loss, LossReport,
    LossWeights,
};
use crate::model::SegModel;
use crate::optim::{clip_grad_norm, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    /// Self-training starts at this epoch (0-based).
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables per-epoch evaluation).
    pub eval_every: usize,
    pub grad_clip: f64,
    pub augment: AugmentConfig,
    /// Feed the compact attribute description instead of the raw sentence.
    pub use_attribute_text: bool,
    /// Which attribute heads contribute to the attribute loss.
    pub attr_heads: [bool; NUM_ATTRIBUTES],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 12,
            epochs: 60,
            weights: LossWeights::default(),
            warmup_epochs: 5,
            seed: 0,
            eval_every: 1,
            grad_clip: 5.0,
            augment: AugmentConfig::default(),
            use_attribute_text: true,
            attr_heads: [true; NUM_ATTRIBUTES],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Train and evaluate on the same unlabeled pool.
    Transductive,
    /// Train on one split, evaluate on a held-out split.
    Inductive,
}

impl std::str::FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(FitMode::Transductive),
            "inductive" => Ok(FitMode::Inductive),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub eval: Option<EvalResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dice: Option<f64>,
}

impl History {
    pub fn last_eval(&self) -> Option<&EvalResult> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

#[derive(Serialize)]
struct StepLog {
    step: u64,
    epoch: usize,
    l_c: f64,
    l_a: f64,
    l_st: f64,
    l_total: f64,
    coverage: f64,
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

/// One optimizer step on `batch`. Gradients are averaged over the batch;
/// the self-training term is active once `epoch >= warmup_epochs`.
pub fn train_step(
    model: &mut SegModel,
    optimizer: &mut Adam,
    batch: &[ImageTextSample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let (h, w) = (batch[0].height(), batch[0].width());
    if batch.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::shape(
            "batch",
            format!("{h}x{w}"),
            "mixed image sizes",
        ));
    }
    let wt = &config.weights;
    let st_active = epoch >= config.warmup_epochs && wt.lambda_st > 0.0;
    let learn = wt.lambda_c > 0.0 || wt.lambda_a > 0.0 || st_active;
    let scale = 1.0 / batch.len() as f64;
    model.zero_grad();
    let mut report = LossReport::default();
    for sample in batch {
        let tokens = SegModel::tokens_for(sample, config.use_attribute_text);
        let (bundle, cache) = model.forward(&sample.image, &tokens, wt.alpha)?;
        let (l_c, g_c) = coarse_loss_grad(&bundle.p, &sample.coarse_mask)?;
        let l_c = finite("coarse", l_c)?;
        let (l_a, g_a) =
            attribute_loss_grad(&bundle.attr_logits, &sample.attr_labels, config.attr_heads)?;
        let l_a = finite("attribute", l_a)?;
        let (l_st, g_st, coverage) = self_training_loss_grad(&bundle.p, wt.delta)?;
        let l_st = if st_active {
            finite("self-training", l_st)?
        } else {
            0.0
        };
        report.l_c += scale * l_c;
        report.l_a += scale * l_a;
        report.l_st += scale * l_st;
        report.pseudo_label_coverage += scale * coverage;
        if !learn {
            continue;
        }
        let mut dp = Tensor::zeros(bundle.p.shape());
        dp.scaled_add_assign(scale * wt.lambda_c, &g_c);
        if st_active {
            dp.scaled_add_assign(scale * wt.lambda_st, &g_st);
        }
        let dl: Vec<Vec<f64>> = g_a
            .iter()
            .map(|g| g.iter().map(|v| v * scale * wt.lambda_a).collect())
            .collect();
        model.backward(&cache, &dp, (wt.lambda_a > 0.0).then_some(dl.as_slice()));
    }
    let lambda_st = if st_active { wt.lambda_st } else { 0.0 };
    report.l_total = finite(
        "total",
        total_loss(
            report.l_c,
            report.l_a,
            report.l_st,
            &LossWeights {
                lambda_st,
                ..wt.clone()
            },
        ),
    )?;
    let mut params = model.trainable_parameters();
    clip_grad_norm(&mut params, config.grad_clip);
    optimizer.step(&mut params);
    Ok(report)
}

/// Owns the model, optimizer and data-order RNG for a training run.
pub struct Trainer {
    pub model: SegModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    parser: AttributeParser,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    log: Option<Box<dyn Write>>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: SegModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.lr);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            optimizer,
            parser: AttributeParser::default(),
            config,
            rng,
            epoch: 0,
            step: 0,
            log: None,
            checkpoint_dir: None,
        })
    }

    /// Streams one JSON object per optimizer step.
    pub fn with_log(mut self, log: Box<dyn Write>) -> Self {
        self.log = Some(log);
        self
    }

    /// Writes `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step_on(&mut self, batch: &[ImageTextSample]) -> Result<LossReport> {
        let report = train_step(
            &mut self.model,
            &mut self.optimizer,
            batch,
            &self.config,
            self.epoch,
        )?;
        self.step += 1;
        if let Some(log) = self.log.as_mut() {
            let line = StepLog {
                step: self.step,
                epoch: self.epoch,
                l_c: report.l_c,
                l_a: report.l_a,
                l_st: report.l_st,
                l_total: report.l_total,
                coverage: report.pseudo_label_coverage,
            };
            serde_json::to_writer(&mut *log, &line)?;
            writeln!(log)?;
        }
        Ok(report)
    }

    /// One pass over `data` in a seeded random order, augmenting each sample.
    pub fn run_epoch(&mut self, data: &[ImageTextSample]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut mean = LossReport::default();
        let batches = order.chunks(self.config.batch_size).count() as f64;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment(&data[i], &self.config.augment, &self.parser, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            let r = self.step_on(&batch)?;
            mean.l_c += r.l_c / batches;
            mean.l_a += r.l_a / batches;
            mean.l_st += r.l_st / batches;
            mean.l_total += r.l_total / batches;
            mean.pseudo_label_coverage += r.pseudo_label_coverage / batches;
        }
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains for the configured epochs, evaluating on `eval` (when it
    /// carries ground truth) every `eval_every` epochs and after the last.
    pub fn fit(
        &mut self,
        train: &[ImageTextSample],
        eval: Option<&[ImageTextSample]>,
    ) -> Result<History> {
        let mut history = History::default();
        let eval = eval.filter(|e| !e.is_empty() && e.iter().all(|s| s.gt_mask.is_some()));
        let epochs = self.config.epochs;
        for e in 0..epochs {
            let loss = self.run_epoch(train)?;
            let due = self.config.eval_every > 0 && (e + 1) % self.config.eval_every == 0;
            let result = match eval {
                Some(set) if due || e + 1 == epochs => Some(evaluate(
                    &self.model,
                    set,
                    self.config.weights.alpha,
                    self.config.use_attribute_text,
                    false,
                )?),
                _ => None,
            };
            if let Some(r) = &result {
                if history.best_dice.is_none_or(|b| r.dice > b) {
                    history.best_dice = Some(r.dice);
                    history.best_epoch = Some(e);
                    if let Some(dir) = &self.checkpoint_dir {
                        checkpoint::save(&self.model, &dir.join("best.ckpt"))?;
                    }
                }
            }
            if let Some(dir) = &self.checkpoint_dir {
                checkpoint::save(&self.model, &dir.join("last.ckpt"))?;
            }
            history.epochs.push(EpochRecord {
                epoch: e,
                loss,
                eval: result,
            });
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(history)
    }
}

/// Deterministic split: the last `holdout` fraction of a seeded permutation.
pub fn split_holdout<T: Clone>(items: &[T], holdout: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5711_7000));
    let n_hold = ((items.len() as f64) * holdout.clamp(0.0, 1.0)).round() as usize;
    let n_hold = n_hold.min(items.len().saturating_sub(1));
    let (train, test) = idx.split_at(items.len() - n_hold);
    (
        train.iter().map(|&i| items[i].clone()).collect(),
        test.iter().map(|&i| items[i].clone()).collect(),
    )
}

/// Trains a model on `dataset`. Transductive runs evaluate on the training
/// pool; inductive runs hold out `holdout` of it for evaluation.
pub fn fit(
    model: SegModel,
    dataset: &[ImageTextSample],
    config: &TrainConfig,
    mode: FitMode,
    holdout: f64,
) -> Result<(SegModel, History)> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let history = match mode {
        FitMode::Transductive => trainer.fit(dataset, Some(dataset))?,
        FitMode::Inductive => {
            let (train, test) = split_holdout(dataset, holdout, config.seed);
            trainer.fit(&train, Some(&test))?
        }
    };
    Ok((trainer.model, history))
}
