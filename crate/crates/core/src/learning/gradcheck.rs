use super::{ParamSet, Scalar};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat parameter index where the maximum occurred.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against `(f(p + eps) - f(p - eps)) / 2 eps` for
/// every parameter. Relative error uses `max(|a|, |n|, 1e-8)` as the
/// denominator. Reports only; never asserts.
pub fn finite_difference_gradcheck<T, F>(
    mut loss_fn: F,
    params: &ParamSet<T>,
    analytic: &ParamSet<T>,
    eps: f64,
) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&ParamSet<T>) -> f64,
{
    let mut probe = params.clone();
    let analytic = analytic.to_flat_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.get_flat(i);
        let base = orig.to_f64().unwrap();
        probe.set_flat(i, T::from_f64_lossy(base + eps));
        let up = loss_fn(&probe);
        probe.set_flat(i, T::from_f64_lossy(base - eps));
        let down = loss_fn(&probe);
        probe.set_flat(i, orig);

        let numeric = (up - down) / (2.0 * eps);
        let a = a.to_f64().unwrap();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{
        soft_cross_entropy_batch, stream_rng, Architecture, Classifier, ConvSpec, Role,
    };
    use ndarray::{arr1, Array2, Array4};
    use rand::Rng;

    #[test]
    fn linear_loss_is_exact() {
        let w = [0.3, -1.2, 4.0, 0.0];
        let params = ParamSet::new(vec![arr1(&[1.0f64, 2.0, -3.0, 0.5]).into_dyn()]);
        let analytic = ParamSet::new(vec![arr1(&w).into_dyn()]);
        let report = finite_difference_gradcheck(
            |p: &ParamSet<f64>| p.to_flat_vec().iter().zip(&w).map(|(a, b)| a * b).sum(),
            &params,
            &analytic,
            1e-5,
        );
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn two_class_toy_model_cross_entropy() {
        let mut rng = stream_rng(11, "gradcheck");
        let arch = Architecture {
            blocks: vec![ConvSpec {
                out_channels: 3,
                kernel: 3,
                stride: 2,
            }],
        };
        let model = Classifier::<f64>::new(arch, 2, 2, Role::Source, &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((3, 2, 5, 5), || rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.3, 0.7, 0.5, 0.5]).unwrap();

        let cache = model.forward_cached(x.view()).unwrap();
        let bl = soft_cross_entropy_batch(t.view(), cache.logits.view()).unwrap();
        let grads = model.backward(&cache, bl.dlogits.view(), false);

        let report = finite_difference_gradcheck(
            |p| {
                let mut m = model.clone();
                m.params = p.clone();
                let z = m.forward(x.view()).unwrap();
                soft_cross_entropy_batch(t.view(), z.view()).unwrap().loss
            },
            &model.params,
            &grads,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
