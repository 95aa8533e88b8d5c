use mb_core::data::{generate_synthetic_pairs, GapConfig};
use mb_core::distill::{train_target_f2, F2Config, TeacherSet, TrainConfig};
use mb_core::experiments::{
    evaluate_run, run_methods, run_pipeline, ExperimentConfig, Method, PretrainCache, RunRecord,
    RunStatus,
};
use mb_core::learning::{stream_rng, Architecture, Classifier, ConvSpec, Role};

fn oa(records: &[RunRecord], m: Method) -> f64 {
    records.iter().find(|r| r.method == m).unwrap().oa().unwrap()
}

/// A fast configuration for plumbing tests.
fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.samples_per_class = 60;
    cfg.source.samples_per_class = 30;
    cfg.source.epochs = 3;
    cfg.epochs.finetune = 10;
    cfg.epochs.f1 = 2;
    cfg.epochs.f2 = 2;
    cfg.epochs.baseline = 2;
    cfg
}

#[test]
fn default_config_clears_chance_and_kd_matches_sar_free_run() {
    let cfg = ExperimentConfig::default();
    let full = run_methods(&cfg, 1, &[Method::OursIrm, Method::KdSoftOpt], None, &mut PretrainCache::default())
        .unwrap();
    let target = oa(&full, Method::OursIrm);
    assert!(target > 0.25 + 0.10, "target OA {target}");

    // kd-soft-opt alone trains F1 without the SAR branch and skips F2; the
    // optical student must come out identical.
    let alone = run_methods(&cfg, 1, &[Method::KdSoftOpt], None, &mut PretrainCache::default()).unwrap();
    assert_eq!(alone[0].metrics, full[1].metrics);
    assert!(alone[0].channels_seen.as_ref().unwrap().sar.is_empty());
}

#[test]
fn finetune_sar_without_sar_signal_is_chance() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.informativeness_sar = 0.0;
    let recs = run_methods(&cfg, 2, &[Method::FinetuneSar], None, &mut PretrainCache::default()).unwrap();
    let acc = recs[0].oa().unwrap();
    assert!((acc - 0.25).abs() <= 0.03, "OA {acc}");
}

#[test]
fn supervised_fusion_on_full_train_is_at_least_kd_on_clean_data() {
    let mut cfg = ExperimentConfig::default();
    cfg.clouds.image_level_fraction = 0.0;
    cfg.distill.supervised_full_train = true;
    let recs = run_methods(
        &cfg,
        3,
        &[Method::SupervisedFusion, Method::KdSoftOpt],
        None,
        &mut PretrainCache::default(),
    )
    .unwrap();
    let (sup, kd) = (oa(&recs, Method::SupervisedFusion), oa(&recs, Method::KdSoftOpt));
    assert!(sup >= kd, "supervised {sup} vs kd {kd}");
}

#[test]
fn equal_scores_make_irm_a_no_op() {
    let arch = Architecture {
        blocks: vec![ConvSpec {
            out_channels: 4,
            kernel: 3,
            stride: 2,
        }],
    };
    let gap = GapConfig {
        samples_per_class: 16,
        ..GapConfig::default()
    };
    let ds = generate_synthetic_pairs(&gap, 5).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let pool = ds.inputs_of(&idx);
    let new = |ch, role, label| Classifier::new(arch.clone(), ch, 4, role, &mut stream_rng(5, label)).unwrap();
    // Zero heads give uniform outputs, so both auxiliaries score every
    // sample 1/M and every batch has rho = (1, 1).
    let mut aux_opt = new(3, Role::AuxOpt, "a");
    let mut aux_sar = new(gap.sar_channels, Role::AuxSar, "b");
    aux_opt.zero_head();
    aux_sar.zero_head();
    let teachers = TeacherSet {
        source: new(3, Role::Source, "s"),
        aux_opt,
        aux_sar,
    };
    let run = |irm| {
        let cfg = F2Config {
            train: TrainConfig {
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            irm,
            ..F2Config::default()
        };
        train_target_f2(&teachers, &pool, None, &arch, &cfg, 5).unwrap()
    };
    let (on, off) = (run(true), run(false));
    assert!(on.trace.records.iter().all(|r| r.rho_opt == 1.0 && r.rho_sar == 1.0));
    assert_eq!(on.target.params, off.target.params);
}

#[test]
fn persisted_run_is_self_contained() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let rec = run_pipeline(&small(), 4, &dir).unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    for f in ["config.toml", "metrics.toml", "trace.csv", "record.json", "checkpoints/final-fused.ckpt"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let snap = ExperimentConfig::load(&dir.join("config.toml")).unwrap();
    assert_eq!(snap.method, Method::OursIrm);
    assert_eq!(snap.seeds, vec![4]);
    assert_eq!(evaluate_run(&dir).unwrap(), rec.metrics.clone().unwrap());
    let back = RunRecord::load(&dir).unwrap();
    assert_eq!(back.trace, rec.trace);
    assert_eq!(back.trace.len(), 2 * 2); // 2 epochs x ceil(pool / 64) batches
    assert!(!dir.join(".staging").exists());
}

#[test]
fn divergence_leaves_a_failed_record() {
    let mut cfg = small();
    cfg.optimizer.lr = 1e30;
    cfg.optimizer.kind = mb_core::learning::OptimizerKind::Sgd { momentum: 0.0 };
    let tmp = tempfile::tempdir().unwrap();
    let err = run_methods(&cfg, 0, &[Method::FinetuneOpt], Some(tmp.path()), &mut PretrainCache::default())
        .unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let rec = RunRecord::load(&tmp.path().join("finetune-opt")).unwrap();
    assert!(matches!(rec.status, RunStatus::Failed { .. }), "{:?}", rec.status);
}
