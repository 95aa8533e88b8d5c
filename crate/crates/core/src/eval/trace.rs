use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TRACE_HEADER: &str =
    "epoch,batch,loss_opt,loss_sar,loss_src,rho_opt_pre,rho_opt,rho_sar_pre,rho_sar";

/// One training batch of the target model. Losses are the unweighted
/// per-teacher terms; the ratios are those applied to that batch (1 when
/// regulation is off).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss_opt: f64,
    pub loss_sar: f64,
    pub loss_src: f64,
    pub rho_opt_pre: f64,
    pub rho_opt: f64,
    pub rho_sar_pre: f64,
    pub rho_sar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAggregate {
    pub epoch: usize,
    pub loss_opt: f64,
    pub loss_sar: f64,
    pub loss_src: f64,
    pub rho_opt: f64,
    pub rho_sar: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<BatchRecord>,
}

impl LossTrace {
    pub fn push(&mut self, r: BatchRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-epoch means, in epoch order.
    pub fn epoch_means(&self) -> Vec<EpochAggregate> {
        let mut out: Vec<EpochAggregate> = Vec::new();
        for r in &self.records {
            if out.last().map(|a| a.epoch) != Some(r.epoch) {
                out.push(EpochAggregate {
                    epoch: r.epoch,
                    loss_opt: 0.0,
                    loss_sar: 0.0,
                    loss_src: 0.0,
                    rho_opt: 0.0,
                    rho_sar: 0.0,
                    batches: 0,
                });
            }
            let a = out.last_mut().unwrap();
            a.loss_opt += r.loss_opt;
            a.loss_sar += r.loss_sar;
            a.loss_src += r.loss_src;
            a.rho_opt += r.rho_opt;
            a.rho_sar += r.rho_sar;
            a.batches += 1;
        }
        for a in &mut out {
            let n = a.batches as f64;
            a.loss_opt /= n;
            a.loss_sar /= n;
            a.loss_src /= n;
            a.rho_opt /= n;
            a.rho_sar /= n;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(TRACE_HEADER.split(','))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "trace not found"),
            ));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != TRACE_HEADER {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("unexpected trace header {}", header.join(",")),
            });
        }
        let records = r.deserialize().collect::<std::result::Result<Vec<BatchRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// `|slope(opt) - slope(sar)|` where `slope = (first - last) / first` over
/// per-epoch mean losses. `None` with fewer than two epochs or when either
/// first-epoch mean is zero.
pub fn descent_gap(trace: &LossTrace) -> Option<f64> {
    let means = trace.epoch_means();
    if means.len() < 2 {
        return None;
    }
    let (first, last) = (means.first()?, means.last()?);
    let slope = |f: f64, l: f64| (f != 0.0).then(|| (f - l) / f);
    Some((slope(first.loss_opt, last.loss_opt)? - slope(first.loss_sar, last.loss_sar)?).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(epoch: usize, batch: usize, lo: f64, ls: f64) -> BatchRecord {
        BatchRecord {
            epoch,
            batch,
            loss_opt: lo,
            loss_sar: ls,
            loss_src: 0.5,
            rho_opt_pre: 1.0,
            rho_opt: 1.0,
            rho_sar_pre: 1.0,
            rho_sar: 1.0,
        }
    }

    fn trace(per_epoch: &[(f64, f64)]) -> LossTrace {
        LossTrace {
            records: per_epoch
                .iter()
                .enumerate()
                .map(|(e, &(o, s))| rec(e, 0, o, s))
                .collect(),
        }
    }

    #[test]
    fn descent_gap_examples() {
        let g = descent_gap(&trace(&[(2.0, 2.0), (1.5, 1.0), (1.0, 1.0)])).unwrap();
        assert!(g.abs() < 1e-15);
        let g = descent_gap(&trace(&[(2.0, 2.0), (1.0, 1.5)])).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
        assert!(descent_gap(&trace(&[(1.0, 1.0)])).is_none());
        assert!(descent_gap(&trace(&[(0.0, 1.0), (0.0, 0.5)])).is_none());
    }

    #[test]
    fn epoch_means_average_batches() {
        let t = LossTrace {
            records: vec![rec(0, 0, 1.0, 3.0), rec(0, 1, 3.0, 5.0), rec(1, 0, 0.5, 0.5)],
        };
        let m = t.epoch_means();
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].loss_opt, m[0].loss_sar, m[0].batches), (2.0, 4.0, 2));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let t = LossTrace {
            records: vec![rec(0, 0, 1.25, 0.75), rec(1, 3, 0.5, 0.25)],
        };
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_HEADER);
        assert_eq!(LossTrace::read_csv(&p).unwrap(), t);

        let empty = dir.path().join("empty.csv");
        LossTrace::default().write_csv(&empty).unwrap();
        assert!(LossTrace::read_csv(&empty).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn gap_symmetric_and_shift_free(
            losses in prop::collection::vec((0.1f64..5.0, 0.1f64..5.0), 2..20)
        ) {
            let a = descent_gap(&trace(&losses)).unwrap();
            let swapped: Vec<(f64, f64)> = losses.iter().map(|&(o, s)| (s, o)).collect();
            let b = descent_gap(&trace(&swapped)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            // Scaling a loss curve leaves its normalized slope unchanged.
            let scaled: Vec<(f64, f64)> = losses.iter().map(|&(o, s)| (3.0 * o, s)).collect();
            let c = descent_gap(&trace(&scaled)).unwrap();
            prop_assert!((a - c).abs() < 1e-9);
        }
    }
}
