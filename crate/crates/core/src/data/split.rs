use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::learning::stream_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub labeled_per_class: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            labeled_per_class: 20,
        }
    }
}

/// Stratified random split: per class, `round(test_fraction * n_c)` test
/// samples, then exactly `labeled_per_class` labeled training samples; the
/// rest of train becomes the unlabeled pool.
pub fn split_dataset(dataset: &Dataset, cfg: &SplitConfig, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidInput(format!(
            "test_fraction must be in [0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let m = dataset.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, s) in dataset.samples.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no label", s.id)))?;
        if label >= m {
            return Err(Error::InvalidInput(format!("sample {} label out of range", s.id)));
        }
        by_class[label].push(i);
    }

    let mut out = dataset.clone();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut stream_rng(seed, &format!("split-class-{class}")));
        let n_test = (cfg.test_fraction * idx.len() as f64).round() as usize;
        let n_train = idx.len() - n_test;
        if n_train < cfg.labeled_per_class {
            return Err(Error::InvalidInput(format!(
                "class {class} has {n_train} training samples, fewer than labeled_per_class = {}",
                cfg.labeled_per_class
            )));
        }
        for (rank, &i) in idx.iter().enumerate() {
            out.samples[i].split = Some(if rank < n_test {
                Split::Test
            } else if rank < n_test + cfg.labeled_per_class {
                Split::TrainLabeled
            } else {
                Split::TrainUnlabeled
            });
        }
    }
    out.provenance.labeled_per_class = Some(cfg.labeled_per_class);
    out.provenance.steps.push(format!(
        "split: seed={seed} test_fraction={} labeled_per_class={}",
        cfg.test_fraction, cfg.labeled_per_class
    ));
    Ok(out)
}
