use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method};
use super::models::{evaluate, train_late_fusion, FinalModel};
use crate::data::{
    apply_cloud_masks, generate_synthetic_pairs, load_dataset, save_dataset, split_dataset,
    Dataset, GapConfig, LabeledPairs, OPTICAL_CHANNELS,
};
use crate::distill::{
    fine_tune_source, save_checkpoint, train_auxiliaries_f1, train_supervised, train_target_f2,
    ChannelLog, F1Config, F1Output, F2Config, F2Output, FineTuneConfig, StageHistory,
    TeacherSet, TrainConfig,
};
use crate::eval::{descent_gap, write_metrics_file, LossTrace, MetricsFile};
use crate::learning::{stream_rng, Classifier, Role};
use crate::{Error, Result};

/// Directory for cached prepared datasets, keyed by their settings.
pub const DATA_CACHE_ENV: &str = "MB_DATA_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherChecksums {
    /// (source, optical auxiliary, SAR auxiliary) before F2.
    pub before: [String; 3],
    pub after: [String; 3],
    /// Source model before and after F1.
    pub source_f1: [String; 2],
}

/// Everything persisted about one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub version: String,
    pub status: RunStatus,
    pub metrics: Option<MetricsFile>,
    pub descent_gap: Option<f64>,
    pub teacher_checksums: Option<TeacherChecksums>,
    pub channels_seen: Option<ChannelLog>,
    pub histories: Vec<StageHistory>,
    pub timings: Vec<StageTiming>,
    #[serde(skip)]
    pub trace: LossTrace,
}

impl RunRecord {
    fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            status: RunStatus::Completed,
            metrics: None,
            descent_gap: None,
            teacher_checksums: None,
            channels_seen: None,
            histories: Vec::new(),
            timings: Vec::new(),
            trace: LossTrace::default(),
        }
    }

    pub fn oa(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.overall.oa)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("record.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut rec: RunRecord = serde_json::from_str(&text)?;
        let t = dir.join("trace.csv");
        if t.exists() {
            rec.trace = LossTrace::read_csv(&t)?;
        }
        Ok(rec)
    }
}

fn stamp<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    out
}

fn cache_key(cfg: &ExperimentConfig, seed: u64) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        data: &'a super::config::DataSpec,
        clouds: &'a crate::data::CloudSimConfig,
        split: &'a crate::data::SplitConfig,
        seed: u64,
        format: u32,
    }
    let key = Key {
        data: &cfg.data,
        clouds: &cfg.clouds,
        split: &cfg.split,
        seed,
        format: crate::data::FORMAT_VERSION,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("key serializes")))
}

/// Generates (or loads) the target dataset, applies clouds and the split.
/// With `MB_DATA_CACHE` set, results are cached under that directory.
pub fn prepare_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let cache = std::env::var_os(DATA_CACHE_ENV).map(|d| PathBuf::from(d).join(cache_key(cfg, seed)));
    if let Some(dir) = &cache {
        if dir.join("manifest.json").exists() {
            return Ok(load_dataset(dir)?.1);
        }
    }
    let base = match &cfg.data.path {
        Some(p) => load_dataset(p)?.1,
        None => generate_synthetic_pairs(&cfg.data.synthetic, seed)?,
    };
    let clouded = if base.samples.iter().any(|s| s.cloud.covered) {
        base
    } else {
        apply_cloud_masks(&base, &cfg.clouds, &cfg.clouds.library(seed)?, seed)?
    };
    let ds = if clouded.samples.iter().all(|s| s.split.is_some()) {
        clouded
    } else {
        split_dataset(&clouded, &cfg.split, seed)?
    };
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_dataset(&ds, dir)?;
    }
    Ok(ds)
}

fn train_cfg(cfg: &ExperimentConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
    }
}

/// Source model pretrained on the cloud-free synthetic source task.
pub fn pretrain_source(cfg: &ExperimentConfig, seed: u64) -> Result<(Classifier<f32>, StageHistory)> {
    let gap = GapConfig {
        classes: cfg.source.classes,
        samples_per_class: cfg.source.samples_per_class,
        template_salt: cfg.source.template_salt,
        ..cfg.data.synthetic.clone()
    };
    let ds = generate_synthetic_pairs(&gap, seed)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let inputs = ds.inputs_of(&idx);
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label.unwrap()).collect();
    let mut model = Classifier::new(
        cfg.model.clone(),
        OPTICAL_CHANNELS,
        cfg.source.classes,
        Role::Source,
        &mut stream_rng(seed, "init-source"),
    )?;
    let hist = train_supervised(
        &mut model,
        inputs.optical.view(),
        &labels,
        &train_cfg(cfg, cfg.source.epochs),
        false,
        seed,
        "pretrain",
    )?;
    Ok((model, hist))
}

/// Pretrained source models keyed by seed; the source task does not
/// depend on cloud settings, so sweep cells of one seed share it.
#[derive(Default)]
pub struct PretrainCache {
    models: BTreeMap<(u64, String), (Classifier<f32>, StageHistory)>,
}

impl PretrainCache {
    fn get(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<(Classifier<f32>, StageHistory)> {
        let key = (
            seed,
            serde_json::to_string(&(&cfg.source, &cfg.model, &cfg.optimizer, cfg.batch_size, &cfg.data.synthetic))?,
        );
        if let Some(v) = self.models.get(&key) {
            return Ok(v.clone());
        }
        let v = pretrain_source(cfg, seed)?;
        self.models.insert(key, v.clone());
        Ok(v)
    }
}

/// Intermediate products shared between methods of one (config, seed).
struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    cache: &'a mut PretrainCache,
    timings: Vec<StageTiming>,
    histories: Vec<StageHistory>,
    dataset: Option<Dataset>,
    source: Option<Classifier<f32>>,
    f1: Option<F1Output>,
    source_f1_checksums: Option<[String; 2]>,
}

impl Shared<'_> {
    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let (cfg, seed) = (self.cfg, self.seed);
            self.dataset = Some(stamp(&mut self.timings, "data", || prepare_dataset(cfg, seed))?);
        }
        Ok(self.dataset.as_ref().unwrap())
    }

    fn labeled(&mut self) -> Result<LabeledPairs> {
        let full = self.cfg.distill.supervised_full_train;
        let ds = self.dataset()?;
        if full {
            ds.full_train()
        } else {
            ds.labeled_train()
        }
    }

    fn pretrained(&mut self) -> Result<Classifier<f32>> {
        let (cfg, seed) = (self.cfg, self.seed);
        let cache = &mut *self.cache;
        let (m, h) = stamp(&mut self.timings, "pretrain", || cache.get(cfg, seed))?;
        self.histories.push(h);
        Ok(m)
    }

    fn source(&mut self) -> Result<Classifier<f32>> {
        if self.source.is_none() {
            let pre = self.pretrained()?;
            let (cfg, seed) = (self.cfg, self.seed);
            let labeled = self.dataset()?.labeled_train()?;
            let classes = self.dataset()?.classes();
            let ft = FineTuneConfig {
                train: train_cfg(cfg, cfg.epochs.finetune),
                freeze_encoder: cfg.distill.freeze_encoder,
            };
            let (m, h) = stamp(&mut self.timings, "finetune", || {
                fine_tune_source(&pre, labeled.inputs.optical.view(), &labeled.labels, classes, &ft, seed)
            })?;
            self.histories.push(h);
            self.source = Some(m);
        }
        Ok(self.source.clone().unwrap())
    }

    fn f1(&mut self, sar_branch: bool) -> Result<&F1Output> {
        let have = self.f1.as_ref().map(|f| f.aux_sar.is_some());
        // A run with the SAR branch also serves requests without it: the
        // optical student does not depend on the SAR branch.
        if have.is_none() || (sar_branch && have == Some(false)) {
            let source = self.source()?;
            let pool = self.dataset()?.unlabeled_pool()?;
            let (cfg, seed) = (self.cfg, self.seed);
            let f1cfg = F1Config {
                train: train_cfg(cfg, cfg.epochs.f1),
                label_mode: cfg.distill.label_mode,
                warm_start: cfg.distill.warm_start,
                sar_branch,
            };
            let before = source.params.checksum();
            let out = stamp(&mut self.timings, "f1", || {
                train_auxiliaries_f1(&source, &pool, &cfg.model, &f1cfg, seed)
            })?;
            self.source_f1_checksums = Some([before, source.params.checksum()]);
            self.histories.push(out.history_opt.clone());
            if sar_branch {
                self.histories.push(out.history_sar.clone());
            }
            self.f1 = Some(out);
        }
        Ok(self.f1.as_ref().unwrap())
    }

    fn f2(&mut self, irm: bool) -> Result<(F2Output, TeacherChecksums, ChannelLog)> {
        let source = self.source()?;
        let f1 = self.f1(true)?.clone();
        let teachers = TeacherSet {
            source,
            aux_opt: f1.aux_opt,
            aux_sar: f1.aux_sar.expect("SAR branch trained"),
        };
        let cfg = self.cfg;
        let f2cfg = F2Config {
            train: train_cfg(cfg, cfg.epochs.f2),
            irm,
            clamp: cfg.clamp,
            label_mode: cfg.distill.label_mode,
            supervised_term: cfg.distill.supervised_term,
        };
        let labeled = self.dataset()?.labeled_train()?;
        let pool = self.dataset()?.unlabeled_pool()?;
        let seed = self.seed;
        let stage = if irm { "f2-irm" } else { "f2-no-irm" };
        let out = stamp(&mut self.timings, stage, || {
            train_target_f2(&teachers, &pool, Some(&labeled), &cfg.model, &f2cfg, seed)
        })?;
        let mut epoch_loss = vec![(0.0, 0usize); f2cfg.train.epochs];
        for bd in &out.breakdowns {
            epoch_loss[bd.epoch].0 += bd.total;
            epoch_loss[bd.epoch].1 += 1;
        }
        self.histories.push(StageHistory {
            stage: stage.into(),
            epoch_loss: epoch_loss.iter().map(|&(s, n)| s / n as f64).collect(),
        });
        let checks = TeacherChecksums {
            before: out.teacher_checksums_before.clone(),
            after: out.teacher_checksums_after.clone(),
            source_f1: self.source_f1_checksums.clone().unwrap(),
        };
        Ok((out, checks, f1.channels_seen))
    }
}

/// Output of one method in a cell, before persistence.
struct MethodResult {
    record: RunRecord,
    model: FinalModel,
    checkpoints: Vec<(&'static str, Classifier<f32>)>,
}

fn run_method(sh: &mut Shared<'_>, method: Method) -> Result<MethodResult> {
    let cfg = sh.cfg;
    let seed = sh.seed;
    let mut rec = RunRecord::new(method, seed);
    let mut checkpoints = Vec::new();
    let model = match method {
        Method::OursIrm | Method::OursNoIrm => {
            let (out, checks, channels) = sh.f2(method == Method::OursIrm)?;
            let f1 = sh.f1.as_ref().unwrap();
            checkpoints.push(("source.ckpt", sh.source.clone().unwrap()));
            checkpoints.push(("aux-opt.ckpt", f1.aux_opt.clone()));
            checkpoints.push(("aux-sar.ckpt", f1.aux_sar.clone().unwrap()));
            rec.descent_gap = descent_gap(&out.trace);
            rec.trace = out.trace;
            rec.teacher_checksums = Some(checks);
            rec.channels_seen = Some(channels);
            FinalModel::Fused(out.target)
        }
        Method::FinetuneOpt => {
            let s = sh.source()?;
            FinalModel::Optical(s)
        }
        Method::KdSoftOpt => {
            let src = sh.source()?;
            checkpoints.push(("source.ckpt", src));
            let f1 = sh.f1(false)?;
            rec.channels_seen = Some(ChannelLog {
                opt: f1.channels_seen.opt.clone(),
                sar: Default::default(),
            });
            FinalModel::Optical(f1.aux_opt.clone())
        }
        Method::FinetuneSar => {
            let labeled = sh.dataset()?.labeled_train()?;
            let classes = sh.dataset()?.classes();
            let sar_ch = labeled.inputs.sar.len_of(ndarray::Axis(1));
            let pre = sh.pretrained()?;
            let ft = FineTuneConfig {
                train: train_cfg(cfg, cfg.epochs.finetune),
                freeze_encoder: cfg.distill.freeze_encoder,
            };
            let (m, h) = if sar_ch == pre.in_channels() {
                stamp(&mut sh.timings, "finetune-sar", || {
                    fine_tune_source(&pre, labeled.inputs.sar.view(), &labeled.labels, classes, &ft, seed)
                })?
            } else {
                // The pretrained encoder cannot read this many channels:
                // train a fresh SAR model end to end instead.
                let mut m = Classifier::new(
                    cfg.model.clone(),
                    sar_ch,
                    classes,
                    Role::Target,
                    &mut stream_rng(seed, "init-finetune-sar"),
                )?;
                let h = stamp(&mut sh.timings, "finetune-sar", || {
                    train_supervised(&mut m, labeled.inputs.sar.view(), &labeled.labels, &ft.train, false, seed, "finetune-sar")
                })?;
                (m, h)
            };
            sh.histories.push(h);
            FinalModel::Sar(m)
        }
        Method::SupervisedFusion => {
            let data = sh.labeled()?;
            let classes = sh.dataset()?.classes();
            let fused = data.inputs.fused();
            let mut m = Classifier::new(
                cfg.model.clone(),
                fused.len_of(ndarray::Axis(1)),
                classes,
                Role::Target,
                &mut stream_rng(seed, "init-supervised-fusion"),
            )?;
            let tc = train_cfg(cfg, cfg.epochs.baseline);
            let h = stamp(&mut sh.timings, "supervised-fusion", || {
                train_supervised(&mut m, fused.view(), &data.labels, &tc, false, seed, "supervised-fusion")
            })?;
            sh.histories.push(h);
            FinalModel::Fused(m)
        }
        Method::LateFusion => {
            let data = sh.labeled()?;
            let classes = sh.dataset()?.classes();
            let tc = train_cfg(cfg, cfg.epochs.baseline);
            let (m, h) = stamp(&mut sh.timings, "late-fusion", || {
                train_late_fusion(&cfg.model, &data, classes, &tc, seed)
            })?;
            sh.histories.push(h);
            m
        }
    };
    let test = sh.dataset()?.test_set()?;
    let classes = sh.dataset()?.classes();
    rec.metrics = Some(stamp(&mut sh.timings, "evaluate", || evaluate(&model, &test, classes))?);
    // Shared stages are attributed to every method that used them; record
    // the full history of this (config, seed) up to this method.
    rec.histories = sh.histories.clone();
    rec.timings = sh.timings.clone();
    Ok(MethodResult {
        record: rec,
        model,
        checkpoints,
    })
}

fn persist(cfg: &ExperimentConfig, res: &MethodResult, dir: &Path) -> Result<()> {
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    snapshot(cfg, res.record.method, res.record.seed).save(&dir.join("config.toml"))?;
    if let Some(m) = &res.record.metrics {
        write_metrics_file(&dir.join("metrics.toml"), m)?;
    }
    res.record.trace.write_csv(&dir.join("trace.csv"))?;
    for (name, m) in &res.checkpoints {
        save_checkpoint(&ck.join(name), m, None)?;
    }
    res.model.save(&ck)?;
    write_record(&res.record, dir)
}

fn write_record(rec: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("record.json");
    let text = serde_json::to_string_pretty(rec)?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// The config a single run reproduces from.
pub fn snapshot(cfg: &ExperimentConfig, method: Method, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method,
        seeds: vec![seed],
        ..cfg.clone()
    }
}

/// Runs several methods for one seed, sharing every common stage. With
/// `out`, each method is persisted to `out/<method>/`. On failure, a
/// record naming the failed stage is written for the failing method and
/// the error is returned.
pub fn run_methods(
    cfg: &ExperimentConfig,
    seed: u64,
    methods: &[Method],
    out: Option<&Path>,
    cache: &mut PretrainCache,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut sh = Shared {
        cfg,
        seed,
        cache,
        timings: Vec::new(),
        histories: Vec::new(),
        dataset: None,
        source: None,
        f1: None,
        source_f1_checksums: None,
    };
    let mut records = Vec::new();
    for &method in methods {
        match run_method(&mut sh, method) {
            Ok(res) => {
                if let Some(dir) = out {
                    persist(cfg, &res, &dir.join(method.as_str()))?;
                }
                records.push(res.record);
            }
            Err(e) => {
                if let Some(dir) = out {
                    let mut rec = RunRecord::new(method, seed);
                    rec.status = RunStatus::Failed {
                        stage: sh.timings.last().map_or("config".into(), |t| t.stage.clone()),
                        error: e.to_string(),
                    };
                    rec.timings = sh.timings.clone();
                    let d = dir.join(method.as_str());
                    write_record(&rec, &d)?;
                    snapshot(cfg, method, seed).save(&d.join("config.toml"))?;
                }
                return Err(e);
            }
        }
    }
    Ok(records)
}

/// The configured method for one seed, persisted directly under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunRecord> {
    let tmp = out.join(".staging");
    let rec = run_methods(cfg, seed, &[cfg.method], Some(&tmp), &mut PretrainCache::default());
    let from = tmp.join(cfg.method.as_str());
    if from.exists() {
        for entry in std::fs::read_dir(&from).map_err(|e| Error::io(&from, e))? {
            let entry = entry.map_err(|e| Error::io(&from, e))?;
            let to = out.join(entry.file_name());
            if to.is_dir() {
                std::fs::remove_dir_all(&to).map_err(|e| Error::io(&to, e))?;
            }
            std::fs::rename(entry.path(), &to).map_err(|e| Error::io(&to, e))?;
        }
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    Ok(rec?.remove(0))
}

/// Re-evaluates a persisted run from its snapshot and final checkpoint.
pub fn evaluate_run(dir: &Path) -> Result<MetricsFile> {
    let snap = dir.join("config.toml");
    if !snap.exists() {
        return Err(Error::MissingFile {
            path: snap,
            sample_id: 0,
        });
    }
    let cfg = ExperimentConfig::load(&snap)?;
    let rec = RunRecord::load(dir)?;
    let model = FinalModel::load(&dir.join("checkpoints"))?;
    let ds = prepare_dataset(&cfg, rec.seed)?;
    evaluate(&model, &ds.test_set()?, ds.classes())
}
