use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::sweep::FractionDelta;
use crate::eval::LossTrace;
use crate::{Error, Result};

pub const LOSS_PLOT_HEADER: &str = "epoch,loss_opt,loss_sar,rho_opt,rho_sar";
pub const SWEEP_PLOT_HEADER: &str = "kind,fraction,seed,value";

/// Per-epoch numbers drawn in a loss-trace plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPlotRow {
    pub epoch: usize,
    pub loss_opt: f64,
    pub loss_sar: f64,
    pub rho_opt: f64,
    pub rho_sar: f64,
}

pub fn loss_plot_rows(trace: &LossTrace) -> Vec<LossPlotRow> {
    trace
        .epoch_means()
        .into_iter()
        .map(|a| LossPlotRow {
            epoch: a.epoch,
            loss_opt: a.loss_opt,
            loss_sar: a.loss_sar,
            rho_opt: a.rho_opt,
            rho_sar: a.rho_sar,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepPointKind {
    /// One seed's delta.
    Point,
    /// Mean delta over seeds.
    Mean,
    /// Half-length of the error bar (sample standard deviation).
    Err,
}

/// One number drawn in the sweep plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlotRow {
    pub kind: SweepPointKind,
    pub fraction: f64,
    pub seed: Option<u64>,
    pub value: f64,
}

pub fn sweep_plot_rows(deltas: &[FractionDelta]) -> Vec<SweepPlotRow> {
    let mut rows = Vec::new();
    for d in deltas {
        let at = |kind, seed, value| SweepPlotRow {
            kind,
            fraction: d.fraction,
            seed,
            value,
        };
        rows.push(at(SweepPointKind::Mean, None, d.mean));
        rows.push(at(SweepPointKind::Err, None, d.std));
        rows.extend(d.per_seed.iter().map(|&(s, v)| at(SweepPointKind::Point, Some(s), v)));
    }
    rows
}

fn write_rows<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_plot_csv<T: serde::de::DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_path(path)?;
    let got = rd.headers()?.iter().collect::<Vec<_>>().join(",");
    if got != header {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("unexpected header {got:?}"),
        });
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("plot rendering failed: {e}"),
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

/// Loss-trace overlay (optical and SAR distillation losses) above a ρ
/// subplot; writes `<stem>.svg` and `<stem>.csv` in `dir`.
pub fn plot_loss_trace(trace: &LossTrace, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let rows = loss_plot_rows(trace);
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    write_rows(&csv_path, LOSS_PLOT_HEADER, &rows)?;

    let e = |err| plot_err(&svg_path, err);
    let root = SVGBackend::new(&svg_path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let (top, bottom) = root.split_vertically(400);
    let x_max = rows.last().map_or(1.0, |r| r.epoch as f64 + 1.0);
    let panels: [(_, &str, [(&str, RGBColor, fn(&LossPlotRow) -> f64); 2]); 2] = [
        (
            top,
            "distillation loss",
            [("loss_opt", BLUE, |r| r.loss_opt), ("loss_sar", RED, |r| r.loss_sar)],
        ),
        (
            bottom,
            "rho",
            [("rho_opt", BLUE, |r| r.rho_opt), ("rho_sar", RED, |r| r.rho_sar)],
        ),
    ];
    for (area, title, series) in panels {
        let (y0, y1) = span(rows.iter().flat_map(|r| series.iter().map(move |s| (s.2)(r))));
        let mut chart = ChartBuilder::on(&area)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..x_max, y0..y1)
            .map_err(e)?;
        chart.configure_mesh().x_desc("epoch").draw().map_err(e)?;
        for (name, color, get) in series {
            chart
                .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch as f64, get(r))), color))
                .map_err(e)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(e)?;
    }
    root.present().map_err(e)?;
    Ok((svg_path.clone(), csv_path))
}

/// Mean IRM delta vs cloud fraction with ±1 sd error bars and per-seed
/// points; writes `<stem>.svg` and `<stem>.csv` in `dir`.
pub fn plot_sweep(deltas: &[FractionDelta], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let rows = sweep_plot_rows(deltas);
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    write_rows(&csv_path, SWEEP_PLOT_HEADER, &rows)?;

    let pick = |kind| rows.iter().filter(move |r| r.kind == kind);
    let means: Vec<(f64, f64)> = pick(SweepPointKind::Mean).map(|r| (r.fraction, r.value)).collect();
    let errs: Vec<f64> = pick(SweepPointKind::Err).map(|r| r.value).collect();
    let points: Vec<(f64, f64)> = pick(SweepPointKind::Point).map(|r| (r.fraction, r.value)).collect();
    let (y0, y1) = span(
        points
            .iter()
            .map(|p| p.1)
            .chain(means.iter().zip(&errs).flat_map(|(m, s)| [m.1 - s, m.1 + s]))
            .chain([0.0]),
    );

    let e = |err| plot_err(&svg_path, err);
    let root = SVGBackend::new(&svg_path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("OA delta (IRM - no IRM) vs cloud fraction", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.05..1.05, y0..y1)
        .map_err(e)?;
    chart
        .configure_mesh()
        .x_desc("cloud fraction")
        .y_desc("delta OA")
        .draw()
        .map_err(e)?;
    chart
        .draw_series(LineSeries::new([(-0.05, 0.0), (1.05, 0.0)], BLACK.mix(0.4)))
        .map_err(e)?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, RED.mix(0.5).filled())))
        .map_err(e)?;
    chart
        .draw_series(
            means
                .iter()
                .zip(&errs)
                .map(|(&(x, m), &s)| ErrorBar::new_vertical(x, m - s, m, m + s, BLUE.filled(), 8)),
        )
        .map_err(e)?;
    chart
        .draw_series(LineSeries::new(means.iter().copied(), BLUE))
        .map_err(e)?;
    root.present().map_err(e)?;
    Ok((svg_path.clone(), csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BatchRecord;

    fn trace() -> LossTrace {
        let mut t = LossTrace::default();
        for epoch in 0..3 {
            for batch in 0..2 {
                let x = (epoch * 2 + batch) as f64;
                t.push(BatchRecord {
                    epoch,
                    batch,
                    loss_opt: 1.0 / (1.0 + x),
                    loss_sar: 2.0 / (1.0 + x),
                    loss_src: 0.5,
                    rho_opt_pre: 0.9,
                    rho_opt: 0.9,
                    rho_sar_pre: 1.0 / 0.9,
                    rho_sar: 1.0 / 0.9 + x * 0.01,
                });
            }
        }
        t
    }

    #[test]
    fn loss_plot_csv_parses_back_to_plotted_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace();
        let (svg, csv) = plot_loss_trace(&t, dir.path(), "loss").unwrap();
        let back: Vec<LossPlotRow> = read_plot_csv(&csv, LOSS_PLOT_HEADER).unwrap();
        assert_eq!(back, loss_plot_rows(&t));
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].loss_opt, (1.0 / 3.0 + 1.0 / 4.0) / 2.0);
        let text = std::fs::read_to_string(svg).unwrap();
        assert!(text.starts_with("<svg") && text.contains("loss_sar") && text.contains("rho_opt"));
    }

    #[test]
    fn sweep_plot_csv_parses_back_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let deltas = vec![
            FractionDelta {
                fraction: 0.1,
                per_seed: vec![(0, 0.01), (1, -0.005)],
                mean: 0.0025,
                std: 0.0106,
            },
            FractionDelta {
                fraction: 0.5,
                per_seed: vec![(0, 0.02)],
                mean: 0.02,
                std: 0.0,
            },
        ];
        let (svg, csv) = plot_sweep(&deltas, dir.path(), "sweep").unwrap();
        let back: Vec<SweepPlotRow> = read_plot_csv(&csv, SWEEP_PLOT_HEADER).unwrap();
        assert_eq!(back, sweep_plot_rows(&deltas));
        let points: Vec<_> = back.iter().filter(|r| r.kind == SweepPointKind::Point).collect();
        assert_eq!(points.len(), 3);
        assert_eq!((points[1].seed, points[1].value), (Some(1), -0.005));
        let first = std::fs::read(&svg).unwrap();
        plot_sweep(&deltas, dir.path(), "sweep").unwrap();
        assert_eq!(std::fs::read(&svg).unwrap(), first);
    }

    #[test]
    fn empty_trace_still_plots() {
        let dir = tempfile::tempdir().unwrap();
        let (_, csv) = plot_loss_trace(&LossTrace::default(), dir.path(), "empty").unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap(), format!("{LOSS_PLOT_HEADER}\n"));
    }
}
