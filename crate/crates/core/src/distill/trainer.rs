use ndarray::{Array2, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pseudo::{one_hot, predict};
use crate::learning::{
    soft_cross_entropy_batch, stream_rng, Classifier, OptimizerConfig, OptimizerState, Scalar,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Shuffled mini-batch index lists covering `0..n` once.
pub(crate) fn epoch_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_finite(loss: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            epoch,
            batch,
        })
    }
}

/// Mean-loss-per-epoch history of a training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage: String,
    pub epoch_loss: Vec<f64>,
}

/// Position of a batch within a stage, for divergence diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BatchPos<'a> {
    pub stage: &'a str,
    pub epoch: usize,
    pub batch: usize,
}

impl BatchPos<'_> {
    /// Divergence error if `loss` is not finite.
    pub fn check(&self, loss: f64) -> Result<()> {
        check_finite(loss, self.stage, self.epoch, self.batch)
    }
}

/// Epoch/batch driver: shuffles `0..n` each epoch under the stage's own
/// stream and calls `step` per mini-batch, which returns the batch loss.
pub fn fit_with<F>(
    n: usize,
    cfg: &TrainConfig,
    shuffle_seed: u64,
    stage: &str,
    mut step: F,
) -> Result<StageHistory>
where
    F: FnMut(&[usize], BatchPos<'_>) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput(format!("{stage}: no training samples")));
    }
    let mut rng = stream_rng(shuffle_seed, &format!("shuffle-{stage}"));
    let mut history = StageHistory {
        stage: stage.to_string(),
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for (batch, idx) in batches.iter().enumerate() {
            total += step(idx, BatchPos { stage, epoch, batch })?;
        }
        history.epoch_loss.push(total / batches.len() as f64);
        log::debug!("{stage} epoch {epoch}: loss {:.6}", history.epoch_loss[epoch]);
    }
    Ok(history)
}

/// Minimizes mean CE of `model` against `targets(batch_indices)` over
/// `inputs`. With `head_only` the encoder receives no update.
pub fn fit<F>(
    model: &mut Classifier<f32>,
    inputs: ArrayView4<f32>,
    cfg: &TrainConfig,
    head_only: bool,
    shuffle_seed: u64,
    stage: &str,
    mut targets: F,
) -> Result<StageHistory>
where
    F: FnMut(&[usize]) -> Result<Array2<f32>>,
{
    let mut opt = OptimizerState::new(cfg.optimizer);
    fit_with(inputs.len_of(Axis(0)), cfg, shuffle_seed, stage, |idx, pos| {
        let x = inputs.select(Axis(0), idx);
        let t = targets(idx)?;
        let cache = model.forward_cached(x.view())?;
        if cache.logits.iter().any(|z| !z.is_finite()) {
            pos.check(f64::NAN)?;
        }
        let bl = soft_cross_entropy_batch(t.view(), cache.logits.view())?;
        let loss = f64::from(bl.loss);
        pos.check(loss)?;
        let grads = model.backward(&cache, bl.dlogits.view(), head_only);
        opt.step(&mut model.params, &grads)?;
        Ok(loss)
    })
}

/// Plain supervised training on hard labels.
pub fn train_supervised(
    model: &mut Classifier<f32>,
    inputs: ArrayView4<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    head_only: bool,
    seed: u64,
    stage: &str,
) -> Result<StageHistory> {
    if labels.len() != inputs.len_of(Axis(0)) {
        return Err(Error::InvalidInput(format!(
            "{stage}: {} labels for {} inputs",
            labels.len(),
            inputs.len_of(Axis(0))
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::InvalidInput(format!(
            "{stage}: label {l} out of range for {} classes",
            model.classes
        )));
    }
    let targets: Array2<f32> = one_hot(labels, model.classes);
    fit(model, inputs, cfg, head_only, seed, stage, |idx| {
        Ok(targets.select(Axis(0), idx))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub train: TrainConfig,
    /// Retrain only the head (the encoder stays bit-identical).
    pub freeze_encoder: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            freeze_encoder: true,
        }
    }
}

/// Adapts a pretrained model to the target class scheme: fresh
/// `classes`-way head, then supervised training on the labeled optical set.
pub fn fine_tune_source(
    pretrained: &Classifier<f32>,
    optical: ArrayView4<f32>,
    labels: &[usize],
    classes: usize,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<(Classifier<f32>, StageHistory)> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs labeled samples".into()));
    }
    let mut model = pretrained.clone();
    model.reset_head(classes, &mut stream_rng(seed, "init-finetune-head"));
    let history = train_supervised(
        &mut model,
        optical,
        labels,
        &cfg.train,
        cfg.freeze_encoder,
        seed,
        "finetune",
    )?;
    Ok((model, history))
}

pub fn accuracy<T: Scalar>(model: &Classifier<T>, inputs: ArrayView4<T>, labels: &[usize]) -> Result<f64> {
    let preds = predict(model, inputs)?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{Architecture, OptimizerKind, Role};
    use ndarray::Array4;

    fn separable(n_per: usize, classes: usize) -> (Array4<f32>, Vec<usize>) {
        let mut rng = stream_rng(1, "toy");
        let n = n_per * classes;
        let mut x = Array4::zeros((n, 3, 8, 8));
        let mut y = Vec::new();
        for i in 0..n {
            let k = i % classes;
            y.push(k);
            for c in 0..3 {
                for h in 0..8 {
                    for w in 0..8 {
                        let base = if (h * 8 + w) % classes == k { 1.0 } else { 0.0 };
                        x[[i, c, h, w]] = base + rng.random_range(-0.1..0.1);
                    }
                }
            }
        }
        (x, y)
    }

    fn adam(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                decay: 0.0,
                kind: OptimizerKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
            },
        }
    }

    fn model(classes: usize) -> Classifier<f32> {
        Classifier::new(Architecture::default(), 3, classes, Role::Source, &mut stream_rng(2, "m"))
            .unwrap()
    }

    #[test]
    fn zero_epochs_leave_head_at_init() {
        let (x, y) = separable(2, 3);
        let pre = model(5);
        let cfg = FineTuneConfig {
            train: adam(0),
            freeze_encoder: true,
        };
        let (a, _) = fine_tune_source(&pre, x.view(), &y, 3, &cfg, 7).unwrap();
        let mut b = pre.clone();
        b.reset_head(3, &mut stream_rng(7, "init-finetune-head"));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_sample_per_class_is_memorized_with_frozen_encoder() {
        let (x, y) = separable(1, 4);
        let pre = model(6);
        let cfg = FineTuneConfig {
            train: adam(200),
            freeze_encoder: true,
        };
        let (f, hist) = fine_tune_source(&pre, x.view(), &y, 4, &cfg, 3).unwrap();
        assert_eq!(accuracy(&f, x.view(), &y).unwrap(), 1.0);
        assert_eq!(f.encoder_checksum(), pre.encoder_checksum());
        assert!(hist.epoch_loss.last().unwrap() < hist.epoch_loss.first().unwrap());
    }

    #[test]
    fn missing_labels_rejected() {
        let (x, _) = separable(1, 2);
        let err = fine_tune_source(&model(2), x.view(), &[], 2, &FineTuneConfig::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn supervised_training_learns_toy_task() {
        let (x, y) = separable(20, 3);
        let mut m = model(3);
        train_supervised(&mut m, x.view(), &y, &adam(15), false, 0, "toy").unwrap();
        assert!(accuracy(&m, x.view(), &y).unwrap() > 0.95);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let (x, y) = separable(2, 2);
        let mut m = model(2);
        m.params.tensors.last_mut().unwrap().fill(f32::NAN);
        let err = train_supervised(&mut m, x.view(), &y, &adam(1), false, 0, "toy").unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, batch: 0, .. }));
    }
}
