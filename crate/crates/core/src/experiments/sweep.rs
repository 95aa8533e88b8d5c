use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::pipeline::{run_methods, PretrainCache, RunRecord};
use crate::{Error, Result};

pub const SWEEP_HEADER: &str = "fraction,seed,method,oa,aa,kappa,oa_cloud,oa_clear";

/// One (fraction, seed, method) result. Subset OAs are absent when the
/// test split has no sample of that kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub method: Method,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub oa_cloud: Option<f64>,
    pub oa_clear: Option<f64>,
}

impl SweepRow {
    fn from_record(fraction: f64, rec: &RunRecord) -> Option<Self> {
        let m = rec.metrics.as_ref()?;
        Some(Self {
            fraction,
            seed: rec.seed,
            method: rec.method,
            oa: m.overall.oa,
            aa: m.overall.aa,
            kappa: m.overall.kappa,
            oa_cloud: m.cloud_covered.as_ref().map(|r| r.oa),
            oa_clear: m.cloud_free.as_ref().map(|r| r.oa),
        })
    }
}

/// All methods of one (fraction, seed) cell; they share dataset, masks,
/// split and initialization seeds.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub fraction: f64,
    pub seed: u64,
    pub records: Vec<RunRecord>,
}

impl SweepCell {
    pub fn record(&self, method: Method) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.method == method)
    }

    /// OA(ours-irm) − OA(ours-no-irm).
    pub fn delta(&self) -> Option<f64> {
        Some(self.record(Method::OursIrm)?.oa()? - self.record(Method::OursNoIrm)?.oa()?)
    }
}

/// IRM deltas at one fraction across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionDelta {
    pub fraction: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn cell(&self, fraction: f64, seed: u64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.fraction == fraction && c.seed == seed)
    }

    pub fn deltas(&self) -> Vec<FractionDelta> {
        delta_summary(&self.rows)
    }
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then(a.seed.cmp(&b.seed))
            .then(a.method.cmp(&b.method))
    });
}

/// Mean and spread of the paired IRM delta per fraction, from sweep rows.
pub fn delta_summary(rows: &[SweepRow]) -> Vec<FractionDelta> {
    let mut arms: BTreeMap<(u64, u64), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let slot = arms.entry((r.fraction.to_bits(), r.seed)).or_default();
        match r.method {
            Method::OursIrm => slot.0 = Some(r.oa),
            Method::OursNoIrm => slot.1 = Some(r.oa),
            _ => {}
        }
    }
    let mut by_fraction: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for ((f, seed), arm) in arms {
        if let (Some(irm), Some(base)) = arm {
            by_fraction.entry(f).or_default().push((seed, irm - base));
        }
    }
    let mut out: Vec<FractionDelta> = by_fraction
        .into_iter()
        .map(|(f, per_seed)| {
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
            let std = if per_seed.len() > 1 {
                (per_seed.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            FractionDelta {
                fraction: f64::from_bits(f),
                per_seed,
                mean,
                std,
            }
        })
        .collect();
    out.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SWEEP_HEADER.split(','))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SWEEP_HEADER {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn cell_dir(fraction: f64, seed: u64) -> String {
    format!("f{fraction:.2}-s{seed}")
}

/// Runs ours-irm and ours-no-irm (plus `extra` methods) for every
/// fraction × seed cell, overriding the configured image-level cloud
/// fraction. With `out`, each cell is persisted under
/// `out/cells/<cell>/<method>/` and `sweep.csv` is written to `out`.
///
/// A failing cell does not stop the sweep; if any failed, the rows of the
/// completed cells are still written and `PartialSweep` is returned.
pub fn sweep_cloud_content(
    cfg: &ExperimentConfig,
    fractions: &[f64],
    seeds: &[u64],
    extra: &[Method],
    out: Option<&Path>,
) -> Result<SweepOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("sweep fractions must be in [0, 1], got {fractions:?}")));
    }
    cfg.validate()?;
    let mut methods = vec![Method::OursIrm, Method::OursNoIrm];
    methods.extend(extra.iter().filter(|m| !methods.contains(m)).copied().collect::<Vec<_>>());

    let mut cache = PretrainCache::default();
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for &seed in seeds {
        for &fraction in fractions {
            let mut c = cfg.clone();
            c.clouds.image_level_fraction = fraction;
            let dir = out.map(|o| o.join("cells").join(cell_dir(fraction, seed)));
            match run_methods(&c, seed, &methods, dir.as_deref(), &mut cache) {
                Ok(records) => {
                    rows.extend(records.iter().filter_map(|r| SweepRow::from_record(fraction, r)));
                    cells.push(SweepCell { fraction, seed, records });
                }
                Err(e) => {
                    log::error!("sweep cell fraction {fraction} seed {seed} failed: {e}");
                    failed += 1;
                }
            }
        }
    }
    sort_rows(&mut rows);
    if let Some(o) = out {
        std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        write_sweep_csv(&o.join("sweep.csv"), &rows)?;
    }
    if failed > 0 {
        return Err(Error::PartialSweep { count: failed });
    }
    Ok(SweepOutcome { cells, rows })
}
