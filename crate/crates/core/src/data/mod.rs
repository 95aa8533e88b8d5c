//! Paired optical/SAR scene data: the in-memory dataset model, synthetic
//! generation with controllable per-modality informativeness, cloud
//! contamination, stratified splitting and the on-disk format.

mod clouds;
mod probe;
mod split;
mod storage;
mod synthetic;

pub use clouds::{apply_cloud_masks, CloudMask, CloudSimConfig, MaskLibrary};
pub use probe::{linear_probe_accuracy, Modality};
pub use split::{split_dataset, SplitConfig};
pub use storage::{
    export_png_previews, load_dataset, save_dataset, DatasetManifest, SampleRecord, ShardRecord,
    FORMAT_VERSION,
};
pub use synthetic::{generate_synthetic_pairs, GapConfig};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const OPTICAL_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudKind {
    None,
    Thin,
    Thick,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudInfo {
    pub covered: bool,
    /// Fraction of optical pixels touched by the mask.
    pub coverage: f64,
    pub kind: CloudKind,
}

impl CloudInfo {
    pub const CLEAR: CloudInfo = CloudInfo {
        covered: false,
        coverage: 0.0,
        kind: CloudKind::None,
    };

    pub fn is_consistent(&self) -> bool {
        self.covered == (self.coverage > 0.0)
            && (self.kind == CloudKind::None) == (self.coverage == 0.0)
            && (0.0..=1.0).contains(&self.coverage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Test,
}

/// One paired observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    /// `(3, H, W)`, values in `[0, 1]`.
    pub optical: Array3<f32>,
    /// `(C_s, H, W)`.
    pub sar: Array3<f32>,
    pub label: Option<usize>,
    pub cloud: CloudInfo,
    pub split: Option<Split>,
}

/// Where a dataset came from, recorded in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Human-readable processing steps, in order.
    pub steps: Vec<String>,
    /// Set once the dataset has been split.
    #[serde(default)]
    pub labeled_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub sar_channels: usize,
    pub provenance: Provenance,
    pub samples: Vec<SceneSample>,
}

/// Input tensors of a set of pairs, without labels. This is all the
/// distillation trainers ever see of the unlabeled pool.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub ids: Vec<u64>,
    pub optical: Array4<f32>,
    pub sar: Array4<f32>,
}

impl PairInputs {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Optical and SAR stacked along channels: `(N, 3 + C_s, H, W)`.
    pub fn fused(&self) -> Array4<f32> {
        fuse(&self.optical, &self.sar)
    }

    pub fn select(&self, idx: &[usize]) -> PairInputs {
        PairInputs {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            optical: self.optical.select(Axis(0), idx),
            sar: self.sar.select(Axis(0), idx),
        }
    }
}

pub fn fuse(optical: &Array4<f32>, sar: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[optical.view(), sar.view()])
        .expect("optical and sar share batch and spatial dims")
}

/// Labeled pairs plus cloud flags, for supervised stages and evaluation.
#[derive(Debug, Clone)]
pub struct LabeledPairs {
    pub inputs: PairInputs,
    pub labels: Vec<usize>,
    pub cloud_flags: Vec<bool>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn indices_in(&self, split: Split) -> Result<Vec<usize>> {
        if self.samples.iter().any(|s| s.split.is_none()) {
            return Err(Error::InvalidInput("dataset has not been split".into()));
        }
        Ok(self
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect())
    }

    pub fn inputs_of(&self, idx: &[usize]) -> PairInputs {
        let h = self.height;
        let w = self.width;
        let mut optical = Array4::zeros((idx.len(), OPTICAL_CHANNELS, h, w));
        let mut sar = Array4::zeros((idx.len(), self.sar_channels, h, w));
        for (row, &i) in idx.iter().enumerate() {
            optical
                .index_axis_mut(Axis(0), row)
                .assign(&self.samples[i].optical);
            sar.index_axis_mut(Axis(0), row).assign(&self.samples[i].sar);
        }
        PairInputs {
            ids: idx.iter().map(|&i| self.samples[i].id).collect(),
            optical,
            sar,
        }
    }

    fn labeled_of(&self, idx: &[usize]) -> Result<LabeledPairs> {
        let labels = idx
            .iter()
            .map(|&i| {
                self.samples[i].label.ok_or_else(|| {
                    Error::InvalidInput(format!("sample {} has no label", self.samples[i].id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledPairs {
            inputs: self.inputs_of(idx),
            labels,
            cloud_flags: idx.iter().map(|&i| self.samples[i].cloud.covered).collect(),
        })
    }

    /// The unlabeled distillation pool. Labels are not exposed.
    pub fn unlabeled_pool(&self) -> Result<PairInputs> {
        Ok(self.inputs_of(&self.indices_in(Split::TrainUnlabeled)?))
    }

    pub fn labeled_train(&self) -> Result<LabeledPairs> {
        self.labeled_of(&self.indices_in(Split::TrainLabeled)?)
    }

    /// Every training sample with its label (labeled and unlabeled pool).
    /// Only for baselines that are explicitly given full supervision.
    pub fn full_train(&self) -> Result<LabeledPairs> {
        let mut idx = self.indices_in(Split::TrainLabeled)?;
        idx.extend(self.indices_in(Split::TrainUnlabeled)?);
        idx.sort_unstable();
        self.labeled_of(&idx)
    }

    pub fn test_set(&self) -> Result<LabeledPairs> {
        self.labeled_of(&self.indices_in(Split::Test)?)
    }

    /// Checks the per-sample and split invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.classes();
        if m == 0 {
            return Err(Error::InvalidInput("dataset has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", s.id)));
            }
            if s.optical.dim() != (OPTICAL_CHANNELS, self.height, self.width)
                || s.sar.dim() != (self.sar_channels, self.height, self.width)
            {
                return Err(Error::Shape(format!("sample {} has wrong tensor shape", s.id)));
            }
            if let Some(l) = s.label {
                if l >= m {
                    return Err(Error::InvalidInput(format!(
                        "sample {} label {l} out of range for {m} classes",
                        s.id
                    )));
                }
            }
            if !s.cloud.is_consistent() {
                return Err(Error::InvalidInput(format!(
                    "sample {} has inconsistent cloud metadata {:?}",
                    s.id, s.cloud
                )));
            }
        }
        let split_count = self.samples.iter().filter(|s| s.split.is_some()).count();
        if split_count != 0 && split_count != self.samples.len() {
            return Err(Error::InvalidInput(
                "split assignment does not cover all samples".into(),
            ));
        }
        if let (Some(k), true) = (self.provenance.labeled_per_class, split_count > 0) {
            let mut per_class = vec![0usize; m];
            for s in &self.samples {
                if s.split == Some(Split::TrainLabeled) {
                    let l = s.label.ok_or_else(|| {
                        Error::InvalidInput(format!("labeled sample {} has no label", s.id))
                    })?;
                    per_class[l] += 1;
                }
            }
            if per_class.iter().any(|&c| c != k) {
                return Err(Error::InvalidInput(format!(
                    "labeled-per-class counts {per_class:?} do not match {k}"
                )));
            }
        }
        Ok(())
    }
}
