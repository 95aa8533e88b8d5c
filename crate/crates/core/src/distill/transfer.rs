use std::collections::BTreeSet;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::pseudo::{one_hot, predict_logits, targets_from_logits, LabelMode};
use super::trainer::{check_finite, epoch_batches, StageHistory, TrainConfig};
use crate::data::{LabeledPairs, PairInputs};
use crate::eval::{BatchRecord, LossTrace};
use crate::irm::{contribution_score, discrepancy_ratios, BatchRatios, ModalityTag, RhoClamp};
use crate::learning::{
    soft_cross_entropy_batch, stream_rng, Architecture, Classifier, OptimizerState, ParamSet, Role,
    Scalar,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F1Config {
    pub train: TrainConfig,
    pub label_mode: LabelMode,
    /// Start the optical auxiliary from the source encoder instead of a
    /// fresh initialization.
    pub warm_start: bool,
    /// Train the SAR auxiliary. Off gives plain soft-label distillation
    /// into an optical student.
    pub sar_branch: bool,
}

impl Default for F1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            label_mode: LabelMode::Soft,
            warm_start: false,
            sar_branch: true,
        }
    }
}

/// Input channel counts each auxiliary saw during training.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLog {
    pub opt: BTreeSet<usize>,
    pub sar: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct F1Output {
    pub aux_opt: Classifier<f32>,
    pub aux_sar: Option<Classifier<f32>>,
    pub channels_seen: ChannelLog,
    pub history_opt: StageHistory,
    pub history_sar: StageHistory,
}

/// One optimizer-carrying student in F1.
struct Student {
    model: Classifier<f32>,
    opt: OptimizerState<f32>,
    history: StageHistory,
    epoch_total: f64,
}

impl Student {
    fn new(model: Classifier<f32>, cfg: &TrainConfig, stage: &str) -> Self {
        Self {
            model,
            opt: OptimizerState::new(cfg.optimizer),
            history: StageHistory {
                stage: stage.to_string(),
                epoch_loss: Vec::new(),
            },
            epoch_total: 0.0,
        }
    }

    fn step(&mut self, x: ArrayView4<f32>, t: ArrayView2<f32>, epoch: usize, b: usize) -> Result<()> {
        let cache = self.model.forward_cached(x)?;
        let bl = soft_cross_entropy_batch(t, cache.logits.view())?;
        let loss = f64::from(bl.loss);
        check_finite(loss, &self.history.stage, epoch, b)?;
        let grads = self.model.backward(&cache, bl.dlogits.view(), false);
        self.opt.step(&mut self.model.params, &grads)?;
        self.epoch_total += loss;
        Ok(())
    }

    fn end_epoch(&mut self, batches: usize) {
        self.history.epoch_loss.push(self.epoch_total / batches as f64);
        self.epoch_total = 0.0;
    }
}

/// Transfer sub-task F1: the frozen source model labels each batch from
/// its optical images; the optical auxiliary learns those labels from the
/// same optical images and the SAR auxiliary from the paired SAR images.
pub fn train_auxiliaries_f1(
    source: &Classifier<f32>,
    pool: &PairInputs,
    arch: &Architecture,
    cfg: &F1Config,
    seed: u64,
) -> Result<F1Output> {
    cfg.train.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidInput("F1: empty unlabeled pool".into()));
    }
    let m = source.classes;
    let mut aux_opt = Classifier::new(
        arch.clone(),
        pool.optical.len_of(Axis(1)),
        m,
        Role::AuxOpt,
        &mut stream_rng(seed, "init-aux-opt"),
    )?;
    if cfg.warm_start {
        if source.encoder != aux_opt.encoder {
            return Err(Error::Config(
                "warm start needs the source and optical auxiliary encoders to match".into(),
            ));
        }
        let k = source.encoder.tensor_count();
        aux_opt.params.tensors[..k].clone_from_slice(source.encoder_params());
    }
    let mut opt = Student::new(aux_opt, &cfg.train, "f1-opt");
    let mut sar = if cfg.sar_branch {
        let model = Classifier::new(
            arch.clone(),
            pool.sar.len_of(Axis(1)),
            m,
            Role::AuxSar,
            &mut stream_rng(seed, "init-aux-sar"),
        )?;
        Some(Student::new(model, &cfg.train, "f1-sar"))
    } else {
        None
    };

    let mut channels = ChannelLog::default();
    let mut rng = stream_rng(seed, "shuffle-f1");
    for epoch in 0..cfg.train.epochs {
        let batches = epoch_batches(pool.len(), cfg.train.batch_size, &mut rng);
        for (b, idx) in batches.iter().enumerate() {
            let xo = pool.optical.select(Axis(0), idx);
            let targets = targets_from_logits(&source.forward(xo.view())?, cfg.label_mode);
            channels.opt.insert(xo.len_of(Axis(1)));
            opt.step(xo.view(), targets.view(), epoch, b)?;
            if let Some(s) = sar.as_mut() {
                let xs = pool.sar.select(Axis(0), idx);
                channels.sar.insert(xs.len_of(Axis(1)));
                s.step(xs.view(), targets.view(), epoch, b)?;
            }
        }
        opt.end_epoch(batches.len());
        if let Some(s) = sar.as_mut() {
            s.end_epoch(batches.len());
        }
    }
    let (aux_sar, history_sar) = match sar {
        Some(s) => (Some(s.model), s.history),
        None => (None, StageHistory::default()),
    };
    Ok(F1Output {
        aux_opt: opt.model,
        aux_sar,
        channels_seen: channels,
        history_opt: opt.history,
        history_sar,
    })
}

/// The three frozen teachers of F2.
#[derive(Debug, Clone)]
pub struct TeacherSet<T> {
    pub source: Classifier<T>,
    pub aux_opt: Classifier<T>,
    pub aux_sar: Classifier<T>,
}

impl<T: Scalar> TeacherSet<T> {
    pub fn validate(&self, target_classes: usize) -> Result<()> {
        for (name, c) in [
            ("source", self.source.classes),
            ("optical auxiliary", self.aux_opt.classes),
            ("SAR auxiliary", self.aux_sar.classes),
        ] {
            if c != target_classes {
                return Err(Error::Config(format!(
                    "{name} has {c} classes, target has {target_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter checksums of (source, optical auxiliary, SAR auxiliary).
    pub fn checksums(&self) -> [String; 3] {
        [
            self.source.params.checksum(),
            self.aux_opt.params.checksum(),
            self.aux_sar.params.checksum(),
        ]
    }
}

/// Teacher outputs for one F2 batch.
#[derive(Debug, Clone)]
pub struct TeacherTargets<T> {
    pub q_opt: Array2<T>,
    pub q_sar: Array2<T>,
    pub q_src: Array2<T>,
    /// Contribution values of the auxiliaries, one per sample.
    pub scores_opt: Vec<f64>,
    pub scores_sar: Vec<f64>,
}

/// Pseudo-labels from optical auxiliary (optical input), SAR auxiliary
/// (SAR input) and source (optical input), plus the auxiliaries'
/// contribution values.
pub fn teacher_targets<T: Scalar>(
    teachers: &TeacherSet<T>,
    ids: &[u64],
    optical: ArrayView4<T>,
    sar: ArrayView4<T>,
    mode: LabelMode,
) -> Result<TeacherTargets<T>> {
    let z_opt = teachers.aux_opt.forward(optical)?;
    let z_sar = teachers.aux_sar.forward(sar)?;
    let z_src = teachers.source.forward(optical)?;
    let scores = |z: &Array2<T>, tag| -> Result<Vec<f64>> {
        z.outer_iter()
            .zip(ids)
            .map(|(row, &id)| Ok(contribution_score(&row.to_vec(), tag, id)?.value))
            .collect()
    };
    Ok(TeacherTargets {
        scores_opt: scores(&z_opt, ModalityTag::Opt)?,
        scores_sar: scores(&z_sar, ModalityTag::Sar)?,
        q_opt: targets_from_logits(&z_opt, mode),
        q_sar: targets_from_logits(&z_sar, mode),
        q_src: targets_from_logits(&z_src, mode),
    })
}

/// Unweighted per-teacher losses and the weighted total of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F2LossBreakdown {
    pub epoch: usize,
    pub batch: usize,
    pub loss_opt: f64,
    pub loss_sar: f64,
    pub loss_src: f64,
    /// Supervised CE on a labeled batch; 0 unless that term is enabled.
    pub loss_sup: f64,
    pub ratios: BatchRatios,
    pub total: f64,
}

impl F2LossBreakdown {
    pub fn record(&self) -> BatchRecord {
        BatchRecord {
            epoch: self.epoch,
            batch: self.batch,
            loss_opt: self.loss_opt,
            loss_sar: self.loss_sar,
            loss_src: self.loss_src,
            rho_opt_pre: self.ratios.rho_opt_pre,
            rho_opt: self.ratios.rho_opt,
            rho_sar_pre: self.ratios.rho_sar_pre,
            rho_sar: self.ratios.rho_sar,
        }
    }
}

/// Weighted F2 loss of `target` on `fused` and its parameter gradient.
/// The ratios are constants: they scale each term's gradient but are not
/// differentiated.
pub fn f2_loss_and_grad<T: Scalar>(
    target: &Classifier<T>,
    fused: ArrayView4<T>,
    tt: &TeacherTargets<T>,
    ratios: &BatchRatios,
) -> Result<(F2LossBreakdown, ParamSet<T>)> {
    let cache = target.forward_cached(fused)?;
    let z = cache.logits.view();
    let lo = soft_cross_entropy_batch(tt.q_opt.view(), z)?;
    let ls = soft_cross_entropy_batch(tt.q_sar.view(), z)?;
    let lsrc = soft_cross_entropy_batch(tt.q_src.view(), z)?;
    let ro = T::from_f64_lossy(ratios.rho_opt);
    let rs = T::from_f64_lossy(ratios.rho_sar);
    let mut dz = lsrc.dlogits;
    dz.scaled_add(ro, &lo.dlogits);
    dz.scaled_add(rs, &ls.dlogits);
    let grads = target.backward(&cache, dz.view(), false);
    let (loss_opt, loss_sar, loss_src) = (
        lo.loss.to_f64().unwrap(),
        ls.loss.to_f64().unwrap(),
        lsrc.loss.to_f64().unwrap(),
    );
    Ok((
        F2LossBreakdown {
            epoch: 0,
            batch: 0,
            loss_opt,
            loss_sar,
            loss_src,
            loss_sup: 0.0,
            ratios: *ratios,
            total: ratios.rho_opt * loss_opt + ratios.rho_sar * loss_sar + loss_src,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F2Config {
    pub train: TrainConfig,
    pub irm: bool,
    pub clamp: RhoClamp,
    pub label_mode: LabelMode,
    /// Add plain CE on the labeled pairs to every batch.
    pub supervised_term: bool,
}

impl Default for F2Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            irm: true,
            clamp: RhoClamp::default(),
            label_mode: LabelMode::Soft,
            supervised_term: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct F2Output {
    pub target: Classifier<f32>,
    pub breakdowns: Vec<F2LossBreakdown>,
    pub trace: LossTrace,
    pub teacher_checksums_before: [String; 3],
    pub teacher_checksums_after: [String; 3],
}

/// Transfer sub-task F2: trains the early-fusion target (optical and SAR
/// stacked along channels) against all three teachers.
pub fn train_target_f2(
    teachers: &TeacherSet<f32>,
    pool: &PairInputs,
    labeled: Option<&LabeledPairs>,
    arch: &Architecture,
    cfg: &F2Config,
    seed: u64,
) -> Result<F2Output> {
    cfg.train.validate()?;
    cfg.clamp.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidInput("F2: empty unlabeled pool".into()));
    }
    let m = teachers.source.classes;
    teachers.validate(m)?;
    let sup = match (cfg.supervised_term, labeled) {
        (false, _) => None,
        (true, Some(l)) if !l.labels.is_empty() => Some(l),
        (true, _) => {
            return Err(Error::Config("supervised term enabled without labeled pairs".into()))
        }
    };
    let before = teachers.checksums();
    let fused = pool.fused();
    let mut target = Classifier::new(
        arch.clone(),
        fused.len_of(Axis(1)),
        m,
        Role::Target,
        &mut stream_rng(seed, "init-target"),
    )?;
    let mut opt = OptimizerState::new(cfg.train.optimizer);
    let mut rng = stream_rng(seed, "shuffle-f2");
    let mut sup_rng = stream_rng(seed, "shuffle-f2-sup");
    let sup_fused: Option<(Array4<f32>, Array2<f32>)> =
        sup.map(|l| (l.inputs.fused(), one_hot(&l.labels, m)));
    let mut sup_queue: Vec<Vec<usize>> = Vec::new();

    let mut breakdowns = Vec::new();
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.train.epochs {
        let batches = epoch_batches(pool.len(), cfg.train.batch_size, &mut rng);
        for (b, idx) in batches.iter().enumerate() {
            let ids: Vec<u64> = idx.iter().map(|&i| pool.ids[i]).collect();
            let xo = pool.optical.select(Axis(0), idx);
            let xs = pool.sar.select(Axis(0), idx);
            let tt = teacher_targets(teachers, &ids, xo.view(), xs.view(), cfg.label_mode)?;
            let ratios = if cfg.irm {
                discrepancy_ratios(&tt.scores_opt, &tt.scores_sar, cfg.clamp)?
            } else {
                BatchRatios::unit(idx.len())
            };
            let xf = fused.select(Axis(0), idx);
            let (mut bd, mut grads) = f2_loss_and_grad(&target, xf.view(), &tt, &ratios)?;
            bd.epoch = epoch;
            bd.batch = b;
            if let Some((sx, sy)) = &sup_fused {
                if sup_queue.is_empty() {
                    sup_queue = epoch_batches(sy.nrows(), cfg.train.batch_size, &mut sup_rng);
                    sup_queue.reverse();
                }
                let sidx = sup_queue.pop().unwrap();
                let cache = target.forward_cached(sx.select(Axis(0), &sidx).view())?;
                let bl = soft_cross_entropy_batch(sy.select(Axis(0), &sidx).view(), cache.logits.view())?;
                grads.add_scaled(1.0, &target.backward(&cache, bl.dlogits.view(), false));
                bd.loss_sup = f64::from(bl.loss);
                bd.total += bd.loss_sup;
            }
            check_finite(bd.total, "f2", epoch, b)?;
            opt.step(&mut target.params, &grads)?;
            trace.push(bd.record());
            breakdowns.push(bd);
        }
    }
    let after = teachers.checksums();
    if before != after {
        return Err(Error::InvalidInput("a teacher changed during F2".into()));
    }
    Ok(F2Output {
        target,
        breakdowns,
        trace,
        teacher_checksums_before: before,
        teacher_checksums_after: after,
    })
}

/// Logits of the fused target on a set of pairs.
pub fn predict_fused(target: &Classifier<f32>, inputs: &PairInputs) -> Result<Array2<f32>> {
    predict_logits(target, inputs.fused().view())
}
