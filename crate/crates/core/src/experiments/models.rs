use std::path::Path;

use ndarray::{Array2, Axis};

use crate::data::{LabeledPairs, PairInputs};
use crate::distill::{
    argmax, fit_with, load_checkpoint, one_hot, predict_logits, save_checkpoint, StageHistory,
    TrainConfig,
};
use crate::eval::{confusion_matrix, metrics, subset_metrics, MetricsFile};
use crate::learning::{
    soft_cross_entropy_batch, stream_rng, Architecture, Classifier, OptimizerState, Role,
};
use crate::{Error, Result};

/// The model a method is evaluated with, tagged by the inputs it reads.
#[derive(Debug, Clone)]
pub enum FinalModel {
    /// Early fusion: optical and SAR stacked along channels.
    Fused(Classifier<f32>),
    Optical(Classifier<f32>),
    Sar(Classifier<f32>),
    /// Two single-modality branches whose logits are summed; equivalent to
    /// one linear head over the concatenated features.
    Late {
        opt: Classifier<f32>,
        sar: Classifier<f32>,
    },
}

impl FinalModel {
    pub fn logits(&self, inputs: &PairInputs) -> Result<Array2<f32>> {
        match self {
            FinalModel::Fused(m) => predict_logits(m, inputs.fused().view()),
            FinalModel::Optical(m) => predict_logits(m, inputs.optical.view()),
            FinalModel::Sar(m) => predict_logits(m, inputs.sar.view()),
            FinalModel::Late { opt, sar } => Ok(predict_logits(opt, inputs.optical.view())?
                + predict_logits(sar, inputs.sar.view())?),
        }
    }

    pub fn predict(&self, inputs: &PairInputs) -> Result<Vec<usize>> {
        Ok(self
            .logits(inputs)?
            .outer_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect())
    }

    fn files(&self) -> Vec<(&'static str, &Classifier<f32>)> {
        match self {
            FinalModel::Fused(m) => vec![("final-fused.ckpt", m)],
            FinalModel::Optical(m) => vec![("final-opt.ckpt", m)],
            FinalModel::Sar(m) => vec![("final-sar.ckpt", m)],
            FinalModel::Late { opt, sar } => {
                vec![("final-late-opt.ckpt", opt), ("final-late-sar.ckpt", sar)]
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, m) in self.files() {
            save_checkpoint(&dir.join(name), m, None)?;
        }
        Ok(())
    }

    /// Loads whichever final checkpoint(s) `dir` holds.
    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| load_checkpoint(&dir.join(name)).map(|(m, _)| m);
        if dir.join("final-late-opt.ckpt").exists() {
            return Ok(FinalModel::Late {
                opt: load("final-late-opt.ckpt")?,
                sar: load("final-late-sar.ckpt")?,
            });
        }
        for (name, wrap) in [
            ("final-fused.ckpt", FinalModel::Fused as fn(_) -> _),
            ("final-opt.ckpt", FinalModel::Optical),
            ("final-sar.ckpt", FinalModel::Sar),
        ] {
            if dir.join(name).exists() {
                return Ok(wrap(load(name)?));
            }
        }
        Err(Error::MissingFile {
            path: dir.join("final-*.ckpt"),
            sample_id: 0,
        })
    }
}

/// Overall and cloud-covered / cloud-free metrics on a labeled set.
pub fn evaluate(model: &FinalModel, test: &LabeledPairs, classes: usize) -> Result<MetricsFile> {
    let preds = model.predict(&test.inputs)?;
    let overall = metrics(&confusion_matrix(&preds, &test.labels, classes)?)?;
    let subsets = subset_metrics(&preds, &test.labels, &test.cloud_flags, classes)?;
    Ok(MetricsFile {
        overall,
        cloud_covered: subsets.cloud_covered,
        cloud_free: subsets.cloud_free,
    })
}

/// Trains the late-fusion baseline on labeled pairs: both branches see the
/// same batches and receive the gradient of the summed logits.
pub fn train_late_fusion(
    arch: &Architecture,
    data: &LabeledPairs,
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FinalModel, StageHistory)> {
    let inputs = &data.inputs;
    let mut opt = Classifier::new(
        arch.clone(),
        inputs.optical.len_of(Axis(1)),
        classes,
        Role::Target,
        &mut stream_rng(seed, "init-late-opt"),
    )?;
    let mut sar = Classifier::new(
        arch.clone(),
        inputs.sar.len_of(Axis(1)),
        classes,
        Role::Target,
        &mut stream_rng(seed, "init-late-sar"),
    )?;
    let targets: Array2<f32> = one_hot(&data.labels, classes);
    let mut opt_state = OptimizerState::new(cfg.optimizer);
    let mut sar_state = OptimizerState::new(cfg.optimizer);
    let history = fit_with(inputs.len(), cfg, seed, "late-fusion", |idx, pos| {
        let co = opt.forward_cached(inputs.optical.select(Axis(0), idx).view())?;
        let cs = sar.forward_cached(inputs.sar.select(Axis(0), idx).view())?;
        let z = &co.logits + &cs.logits;
        if z.iter().any(|v| !v.is_finite()) {
            pos.check(f64::NAN)?;
        }
        let bl = soft_cross_entropy_batch(targets.select(Axis(0), idx).view(), z.view())?;
        let loss = f64::from(bl.loss);
        pos.check(loss)?;
        let go = opt.backward(&co, bl.dlogits.view(), false);
        let gs = sar.backward(&cs, bl.dlogits.view(), false);
        opt_state.step(&mut opt.params, &go)?;
        sar_state.step(&mut sar.params, &gs)?;
        Ok(loss)
    })?;
    Ok((FinalModel::Late { opt, sar }, history))
}
