//! Information regulation: per-sample contribution values from the frozen
//! auxiliary models, per-batch discrepancy ratios, and the ratio-weighted
//! assembly of the target model's distillation loss.
//!
//! The superior modality (larger summed confidence) has its loss scaled
//! down by `sum S_other / sum S_self < 1` and the inferior one scaled up
//! by the reciprocal. The source-teacher term always keeps weight 1.

use serde::{Deserialize, Serialize};

use crate::learning::{softmax, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityTag {
    Opt,
    Sar,
}

/// Softmax probability of the auxiliary model's predicted class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContributionScore {
    pub value: f64,
    /// Predicted class (lowest index on ties).
    pub predicted: usize,
    pub modality: ModalityTag,
    pub sample_id: u64,
}

pub fn contribution_score<T: Scalar>(
    aux_logits: &[T],
    modality: ModalityTag,
    sample_id: u64,
) -> Result<ContributionScore> {
    if aux_logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "contribution score needs at least 2 classes, got {}",
            aux_logits.len()
        )));
    }
    let p = softmax(aux_logits)?;
    let mut predicted = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > p[predicted] {
            predicted = k;
        }
    }
    Ok(ContributionScore {
        value: p[predicted].to_f64().unwrap(),
        predicted,
        modality,
        sample_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for RhoClamp {
    fn default() -> Self {
        Self { min: 0.2, max: 5.0 }
    }
}

impl RhoClamp {
    pub const NONE: RhoClamp = RhoClamp {
        min: 0.0,
        max: f64::INFINITY,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.min <= self.max && self.max > 0.0) {
            return Err(Error::Config(format!(
                "invalid rho clamp [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Per-batch modality weights before and after clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRatios {
    pub rho_opt: f64,
    pub rho_sar: f64,
    pub rho_opt_pre: f64,
    pub rho_sar_pre: f64,
    pub sum_opt: f64,
    pub sum_sar: f64,
    pub clamp: RhoClamp,
    pub batch: usize,
}

impl BatchRatios {
    /// Unit weights, i.e. the unregulated loss.
    pub fn unit(batch: usize) -> Self {
        Self {
            rho_opt: 1.0,
            rho_sar: 1.0,
            rho_opt_pre: 1.0,
            rho_sar_pre: 1.0,
            sum_opt: f64::NAN,
            sum_sar: f64::NAN,
            clamp: RhoClamp::NONE,
            batch,
        }
    }
}

pub fn discrepancy_ratios(
    scores_opt: &[f64],
    scores_sar: &[f64],
    clamp: RhoClamp,
) -> Result<BatchRatios> {
    if scores_opt.len() != scores_sar.len() {
        return Err(Error::InvalidInput(format!(
            "score batches differ in length: {} vs {}",
            scores_opt.len(),
            scores_sar.len()
        )));
    }
    if scores_opt.is_empty() {
        return Err(Error::InvalidInput("empty score batch".into()));
    }
    if let Some(s) = scores_opt
        .iter()
        .chain(scores_sar)
        .find(|s| !(**s > 0.0 && **s <= 1.0))
    {
        return Err(Error::InvalidInput(format!("score {s} outside (0, 1]")));
    }
    clamp.validate()?;
    let sum_opt: f64 = scores_opt.iter().sum();
    let sum_sar: f64 = scores_sar.iter().sum();
    let rho_opt_pre = sum_sar / sum_opt;
    let rho_sar_pre = sum_opt / sum_sar;
    Ok(BatchRatios {
        rho_opt: rho_opt_pre.clamp(clamp.min, clamp.max),
        rho_sar: rho_sar_pre.clamp(clamp.min, clamp.max),
        rho_opt_pre,
        rho_sar_pre,
        sum_opt,
        sum_sar,
        clamp,
        batch: scores_opt.len(),
    })
}

/// `rho_opt * loss_opt + rho_sar * loss_sar + loss_src`. The ratios are
/// plain numbers here; callers scale gradients by the same constants.
pub fn irm_weighted_loss(
    loss_opt: f64,
    loss_sar: f64,
    loss_src: f64,
    ratios: &BatchRatios,
) -> Result<f64> {
    for (name, l) in [("opt", loss_opt), ("sar", loss_sar), ("src", loss_src)] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::InvalidInput(format!("loss_{name} = {l} must be finite and >= 0")));
        }
    }
    Ok(ratios.rho_opt * loss_opt + ratios.rho_sar * loss_sar + loss_src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ratios(opt: f64, sar: f64) -> BatchRatios {
        discrepancy_ratios(&[opt], &[sar], RhoClamp::NONE).unwrap()
    }

    #[test]
    fn contribution_examples() {
        let s = contribution_score(&[0.0f64; 4], ModalityTag::Opt, 0).unwrap();
        assert!((s.value - 0.25).abs() < 1e-15);
        assert_eq!(s.predicted, 0);
        let s = contribution_score(&[8f64.ln(), 0.0, 0.0], ModalityTag::Sar, 1).unwrap();
        assert!((s.value - 0.8).abs() < 1e-12);
        assert!(contribution_score(&[1.0f64, f64::NAN], ModalityTag::Sar, 1).is_err());
        assert!(contribution_score(&[1.0f64], ModalityTag::Sar, 1).is_err());
    }

    #[test]
    fn ratio_examples() {
        let r = discrepancy_ratios(&[0.5, 0.7], &[0.7, 0.5], RhoClamp::default()).unwrap();
        assert_eq!((r.rho_opt, r.rho_sar), (1.0, 1.0));
        let r = ratios(0.8, 0.4);
        assert!((r.rho_opt_pre - 0.5).abs() < 1e-15);
        assert!((r.rho_sar_pre - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clamp_applies_independently() {
        let r = discrepancy_ratios(&[1.0], &[0.1], RhoClamp { min: 0.2, max: 5.0 }).unwrap();
        assert!((r.rho_opt_pre - 0.1).abs() < 1e-15);
        assert_eq!(r.rho_opt, 0.2);
        assert_eq!(r.rho_sar, 5.0);
        assert!((r.rho_sar_pre - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_errors() {
        assert!(discrepancy_ratios(&[0.5], &[0.5, 0.5], RhoClamp::default()).is_err());
        assert!(discrepancy_ratios(&[], &[], RhoClamp::default()).is_err());
        assert!(discrepancy_ratios(&[0.0], &[0.5], RhoClamp::default()).is_err());
    }

    #[test]
    fn weighted_loss_examples() {
        let unit = BatchRatios::unit(4);
        assert_eq!(irm_weighted_loss(0.3, 0.4, 0.5, &unit).unwrap(), 0.3 + 0.4 + 0.5);
        assert_eq!(irm_weighted_loss(1.0, 1.0, 1.0, &ratios(0.8, 0.4)).unwrap(), 3.5);
        assert_eq!(irm_weighted_loss(0.0, 0.0, 0.0, &ratios(0.9, 0.3)).unwrap(), 0.0);
        assert!(irm_weighted_loss(-1.0, 0.0, 0.0, &unit).is_err());
    }

    fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..64).prop_flat_map(|b| {
            (
                prop::collection::vec(0.1f64..=1.0, b),
                prop::collection::vec(0.1f64..=1.0, b),
            )
        })
    }

    proptest! {
        #[test]
        fn reciprocal_and_directional((o, s) in scores()) {
            let r = discrepancy_ratios(&o, &s, RhoClamp::default()).unwrap();
            prop_assert!((r.rho_opt_pre * r.rho_sar_pre - 1.0).abs() < 1e-12);
            if r.sum_opt > r.sum_sar {
                prop_assert!(r.rho_opt_pre < 1.0 && 1.0 < r.rho_sar_pre);
            }
            prop_assert!(r.rho_opt >= 0.2 && r.rho_opt <= 5.0);
        }

        #[test]
        fn scale_invariant((o, s) in scores(), c in 0.1f64..1.0) {
            let a = discrepancy_ratios(&o, &s, RhoClamp::NONE).unwrap();
            let os: Vec<f64> = o.iter().map(|x| x * c).collect();
            let ss: Vec<f64> = s.iter().map(|x| x * c).collect();
            let b = discrepancy_ratios(&os, &ss, RhoClamp::NONE).unwrap();
            prop_assert!((a.rho_opt_pre - b.rho_opt_pre).abs() < 1e-12);
            prop_assert!((a.rho_sar_pre - b.rho_sar_pre).abs() < 1e-12);
        }

        #[test]
        fn score_bounds(z in prop::collection::vec(-30.0f64..30.0, 2..10)) {
            let s = contribution_score(&z, ModalityTag::Opt, 0).unwrap();
            let m = z.len() as f64;
            prop_assert!(s.value >= 1.0 / m - 1e-12 && s.value <= 1.0);
            // Brute-force oracle: max of an independently computed softmax.
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            let oracle = e.iter().cloned().fold(0.0, f64::max) / tot;
            prop_assert!((s.value - oracle).abs() < 1e-12);
        }
    }
}
