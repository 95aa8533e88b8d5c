use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::learning::{soft_cross_entropy_batch, stream_rng};
use crate::{Error, Result};

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.05;
const PROBE_L2: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Optical,
    Sar,
}

const FOLDS: usize = 5;

/// Cross-validated accuracy of a multinomial logistic regression on
/// standardized raw pixels of one modality. Seeded 5-fold split of all
/// labeled samples, full-batch gradient descent; a fixed function of
/// `(dataset, modality, seed)`.
pub fn linear_probe_accuracy(dataset: &Dataset, modality: Modality, seed: u64) -> Result<f64> {
    let mut idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].label.is_some())
        .collect();
    if idx.len() < FOLDS {
        return Err(Error::InvalidInput(format!(
            "probe needs at least {FOLDS} labeled samples"
        )));
    }
    idx.shuffle(&mut stream_rng(seed, "probe-split"));
    let mut correct = 0;
    for fold in 0..FOLDS {
        let (test, train): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .enumerate()
            .map(|(rank, &i)| (rank % FOLDS == fold, i))
            .fold((Vec::new(), Vec::new()), |(mut te, mut tr), (is_test, i)| {
                if is_test {
                    te.push(i)
                } else {
                    tr.push(i)
                }
                (te, tr)
            });
        correct += fold_correct(dataset, modality, &train, &test)?;
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn fold_correct(
    dataset: &Dataset,
    modality: Modality,
    train: &[usize],
    test: &[usize],
) -> Result<usize> {
    let m = dataset.classes();

    let features = |ids: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let d = match modality {
            Modality::Optical => dataset.samples[0].optical.len(),
            Modality::Sar => dataset.samples[0].sar.len(),
        };
        let mut x = Array2::zeros((ids.len(), d));
        let mut y = Vec::with_capacity(ids.len());
        for (row, &i) in ids.iter().enumerate() {
            let s = &dataset.samples[i];
            let src = match modality {
                Modality::Optical => &s.optical,
                Modality::Sar => &s.sar,
            };
            x.row_mut(row)
                .iter_mut()
                .zip(src.iter())
                .for_each(|(a, &b)| *a = f64::from(b));
            y.push(s.label.unwrap());
        }
        (x, y)
    };
    let (mut x_train, y_train) = features(train);
    let (mut x_test, y_test) = features(test);

    let mean = x_train.mean_axis(Axis(0)).unwrap();
    let std = x_train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-9 { s } else { 1.0 });
    for x in [&mut x_train, &mut x_test] {
        *x -= &mean;
        *x /= &std;
    }

    let mut targets = Array2::zeros((train.len(), m));
    for (row, &l) in y_train.iter().enumerate() {
        targets[[row, l]] = 1.0;
    }
    let d = x_train.ncols();
    let mut w = Array2::<f64>::zeros((d, m));
    let mut b = Array1::<f64>::zeros(m);
    for _ in 0..PROBE_STEPS {
        let logits = x_train.dot(&w) + &b;
        let bl = soft_cross_entropy_batch(targets.view(), logits.view())?;
        let gw = x_train.t().dot(&bl.dlogits) + &w * PROBE_L2;
        let gb = bl.dlogits.sum_axis(Axis(0));
        w.scaled_add(-PROBE_LR, &gw);
        b.scaled_add(-PROBE_LR, &gb);
    }
    let logits = x_test.dot(&w) + &b;
    Ok(logits
        .outer_iter()
        .zip(&y_test)
        .filter(|(row, &l)| argmax(row.as_slice().unwrap()) == l)
        .count())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
