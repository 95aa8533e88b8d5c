use ndarray::{s, Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::learning::{softmax_rows, Classifier, Scalar};
use crate::Result;

/// Teacher forwards are chunked so large pools never build one huge im2col.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Full softmax distributions as targets.
    #[default]
    Soft,
    /// One-hot argmax targets.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub soft: Vec<f64>,
    /// Argmax of `soft`, lowest index on ties.
    pub hard: usize,
    pub confidence: f64,
}

/// Index of the largest element, lowest index on ties.
pub fn argmax<T: PartialOrd>(v: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in v.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(x > *b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Logits of `model` on `inputs`, evaluated in chunks.
pub fn predict_logits<T: Scalar>(model: &Classifier<T>, inputs: ArrayView4<T>) -> Result<Array2<T>> {
    let n = inputs.len_of(Axis(0));
    let mut out = Array2::zeros((n, model.classes));
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let logits = model.forward(inputs.slice(s![start..end, .., .., ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&logits);
        start = end;
    }
    Ok(out)
}

/// Hard class predictions of `model` on `inputs`.
pub fn predict<T: Scalar>(model: &Classifier<T>, inputs: ArrayView4<T>) -> Result<Vec<usize>> {
    Ok(predict_logits(model, inputs)?
        .outer_iter()
        .map(|row| argmax(row.iter().copied()))
        .collect())
}

pub fn generate_pseudo_labels<T: Scalar>(
    model: &Classifier<T>,
    inputs: ArrayView4<T>,
) -> Result<Vec<PseudoLabel>> {
    let probs = softmax_rows(predict_logits(model, inputs)?.view());
    Ok(probs
        .outer_iter()
        .map(|row| {
            let soft: Vec<f64> = row.iter().map(|p| p.to_f64().unwrap()).collect();
            let hard = argmax(soft.iter().copied());
            PseudoLabel {
                confidence: soft[hard],
                soft,
                hard,
            }
        })
        .collect())
}

/// Per-sample CE targets derived from teacher logits.
pub(crate) fn targets_from_logits<T: Scalar>(logits: &Array2<T>, mode: LabelMode) -> Array2<T> {
    let probs = softmax_rows(logits.view());
    match mode {
        LabelMode::Soft => probs,
        LabelMode::Hard => {
            let mut out = Array2::zeros(probs.dim());
            for (i, row) in probs.outer_iter().enumerate() {
                out[[i, argmax(row.iter().copied())]] = T::one();
            }
            out
        }
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Array2<T> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = T::one();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{softmax, stream_rng, Architecture, ConvSpec, Role};
    use ndarray::Array4;
    use rand::Rng;

    fn tiny(in_ch: usize, classes: usize) -> Classifier<f64> {
        let arch = Architecture {
            blocks: vec![ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            }],
        };
        Classifier::new(arch, in_ch, classes, Role::Source, &mut stream_rng(3, "init")).unwrap()
    }

    fn batch(b: usize, c: usize) -> Array4<f64> {
        let mut rng = stream_rng(9, "x");
        Array4::from_shape_simple_fn((b, c, 6, 6), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax([0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax([0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn uniform_logits_give_uniform_labels() {
        let mut m = tiny(3, 4);
        m.zero_head();
        for pl in generate_pseudo_labels(&m, batch(5, 3).view()).unwrap() {
            assert!(pl.soft.iter().all(|p| (p - 0.25).abs() < 1e-12));
            assert_eq!(pl.hard, 0);
            assert!((pl.confidence - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_softmax_of_forward() {
        let m = tiny(3, 5);
        let x = batch(7, 3);
        let labels = generate_pseudo_labels(&m, x.view()).unwrap();
        let logits = m.forward(x.view()).unwrap();
        for (pl, row) in labels.iter().zip(logits.outer_iter()) {
            let p = softmax(row.as_slice().unwrap()).unwrap();
            assert!((pl.soft.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in pl.soft.iter().zip(&p) {
                assert!((a - b).abs() < 1e-15);
            }
            assert_eq!(pl.confidence, pl.soft[pl.hard]);
        }
    }

    #[test]
    fn identical_inputs_identical_labels() {
        let m = tiny(2, 3);
        let one = batch(1, 2);
        let x = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let labels = generate_pseudo_labels(&m, x.view()).unwrap();
        assert_eq!(labels[0], labels[1]);
    }

    #[test]
    fn wrong_channels_is_shape_error() {
        let m = tiny(3, 3);
        let err = generate_pseudo_labels(&m, batch(2, 4).view()).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn chunked_inference_matches_single_forward() {
        let m = tiny(1, 3);
        let x = batch(INFERENCE_CHUNK + 3, 1);
        assert_eq!(predict_logits(&m, x.view()).unwrap(), m.forward(x.view()).unwrap());
    }

    #[test]
    fn hard_targets_are_one_hot_argmax() {
        let logits = ndarray::array![[0.0f64, 2.0, 1.0], [5.0, 5.0, 0.0]];
        let t = targets_from_logits(&logits, LabelMode::Hard);
        assert_eq!(t, ndarray::array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
    }
}
