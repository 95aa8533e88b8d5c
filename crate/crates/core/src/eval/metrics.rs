use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidInput(format!(
                "class index out of range: pred {p}, label {t}, classes {classes}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetTag {
    All,
    CloudCovered,
    CloudFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `None` for classes with no true samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// Set when kappa's chance agreement is 1 and the value is defined by
    /// convention rather than by the formula.
    pub kappa_degenerate: bool,
    pub subset: SubsetTag,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

/// OA = trace / N; AA = mean recall over classes present in the labels;
/// kappa = (p_o - p_e) / (1 - p_e) with p_e = sum_k row_k col_k / N^2.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidInput("metrics of an empty confusion matrix".into()));
    }
    let m = cm.classes();
    let nf = n as f64;
    let trace: u64 = (0..m).map(|k| cm.counts[k][k]).sum();
    let row = |k: usize| cm.counts[k].iter().sum::<u64>();
    let col = |k: usize| cm.counts.iter().map(|r| r[k]).sum::<u64>();

    let per_class_recall: Vec<Option<f64>> = (0..m)
        .map(|k| {
            let r = row(k);
            (r > 0).then(|| cm.counts[k][k] as f64 / r as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;

    let p_o = trace as f64 / nf;
    let p_e = (0..m).map(|k| row(k) as f64 * col(k) as f64).sum::<f64>() / (nf * nf);
    let (kappa, kappa_degenerate) = if (1.0 - p_e).abs() < 1e-15 {
        (if p_o == 1.0 { 1.0 } else { 0.0 }, true)
    } else {
        ((p_o - p_e) / (1.0 - p_e), false)
    };
    Ok(MetricsReport {
        oa: p_o,
        aa,
        kappa,
        per_class_recall,
        kappa_degenerate,
        subset: SubsetTag::All,
        samples: n,
        confusion: cm.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReports {
    pub cloud_covered: Option<MetricsReport>,
    pub cloud_free: Option<MetricsReport>,
}

/// Metrics on the cloud-covered and cloud-free subsets separately. An
/// empty subset yields `None`, not a zero report.
pub fn subset_metrics(
    preds: &[usize],
    labels: &[usize],
    cloud_flags: &[bool],
    classes: usize,
) -> Result<SubsetReports> {
    if preds.len() != cloud_flags.len() || labels.len() != cloud_flags.len() {
        return Err(Error::InvalidInput("misaligned subset inputs".into()));
    }
    let pick = |want: bool, tag: SubsetTag| -> Result<Option<MetricsReport>> {
        let (p, l): (Vec<usize>, Vec<usize>) = preds
            .iter()
            .zip(labels)
            .zip(cloud_flags)
            .filter(|(_, &f)| f == want)
            .map(|((&p, &l), _)| (p, l))
            .unzip();
        if p.is_empty() {
            return Ok(None);
        }
        let mut r = metrics(&confusion_matrix(&p, &l, classes)?)?;
        r.subset = tag;
        Ok(Some(r))
    };
    Ok(SubsetReports {
        cloud_covered: pick(true, SubsetTag::CloudCovered)?,
        cloud_free: pick(false, SubsetTag::CloudFree)?,
    })
}

/// Everything written to a run's `metrics.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub overall: MetricsReport,
    pub cloud_covered: Option<MetricsReport>,
    pub cloud_free: Option<MetricsReport>,
}

fn push_report(out: &mut String, section: &str, r: &MetricsReport) {
    let _ = writeln!(out, "[{section}]");
    let _ = writeln!(out, "samples = {}", r.samples);
    let _ = writeln!(out, "oa = {:.6}", r.oa);
    let _ = writeln!(out, "aa = {:.6}", r.aa);
    let _ = writeln!(out, "kappa = {:.6}", r.kappa);
    let _ = writeln!(out, "kappa_degenerate = {}", r.kappa_degenerate);
    let recalls: Vec<String> = r
        .per_class_recall
        .iter()
        .map(|x| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")))
        .collect();
    let _ = writeln!(out, "per_class_recall = [{}]", recalls.join(", "));
    let rows: Vec<String> = r
        .confusion
        .counts
        .iter()
        .map(|row| format!("[{}]", row.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")))
        .collect();
    let _ = writeln!(out, "confusion = [{}]", rows.join(", "));
    out.push('\n');
}

/// Structured text (TOML) with every value printed to 6 decimals, so the
/// file is byte-stable across identical runs.
pub fn write_metrics_file(path: &Path, file: &MetricsFile) -> Result<()> {
    let mut out = String::new();
    push_report(&mut out, "overall", &file.overall);
    if let Some(r) = &file.cloud_covered {
        push_report(&mut out, "cloud_covered", r);
    }
    if let Some(r) = &file.cloud_free {
        push_report(&mut out, "cloud_free", r);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct RawReport {
    samples: u64,
    oa: f64,
    aa: f64,
    kappa: f64,
    kappa_degenerate: bool,
    per_class_recall: Vec<f64>,
    confusion: Vec<Vec<u64>>,
}

#[derive(Deserialize)]
struct RawFile {
    overall: RawReport,
    cloud_covered: Option<RawReport>,
    cloud_free: Option<RawReport>,
}

pub fn read_metrics_file(path: &Path) -> Result<MetricsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawFile = toml::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let conv = |r: RawReport, subset| MetricsReport {
        oa: r.oa,
        aa: r.aa,
        kappa: r.kappa,
        per_class_recall: r
            .per_class_recall
            .into_iter()
            .map(|v| (!v.is_nan()).then_some(v))
            .collect(),
        kappa_degenerate: r.kappa_degenerate,
        subset,
        samples: r.samples,
        confusion: ConfusionMatrix { counts: r.confusion },
    };
    Ok(MetricsFile {
        overall: conv(raw.overall, SubsetTag::All),
        cloud_covered: raw.cloud_covered.map(|r| conv(r, SubsetTag::CloudCovered)),
        cloud_free: raw.cloud_free.map(|r| conv(r, SubsetTag::CloudFree)),
    })
}
