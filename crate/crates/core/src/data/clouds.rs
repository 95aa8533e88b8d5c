use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CloudInfo, CloudKind, Dataset};
use crate::learning::{sample_rng, stream_rng};
use crate::{Error, Result};

const PROCEDURAL_FIELD_SIZE: usize = 64;
const THIN_ALPHA_MIN: f32 = 0.35;
const THIN_ALPHA_MAX: f32 = 0.75;

/// Per-pixel cloud opacity. Optical pixels become
/// `(1 - alpha) * pixel + alpha * 1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudMask {
    pub alpha: Array2<f32>,
    pub kind: CloudKind,
}

impl CloudMask {
    pub fn coverage(&self) -> f64 {
        self.alpha.iter().filter(|&&a| a > 0.0).count() as f64 / self.alpha.len() as f64
    }
}

/// Base cloud fields, one list per kind. Each field is a brightness map
/// of arbitrary size; it is cropped, resampled and thresholded per sample
/// to reach the requested coverage.
#[derive(Debug, Clone, Default)]
pub struct MaskLibrary {
    pub thin: Vec<Array2<f32>>,
    pub thick: Vec<Array2<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudSimConfig {
    /// Fraction of samples that receive a mask.
    pub image_level_fraction: f64,
    /// Target fraction of masked pixels within each masked sample.
    pub per_sample_coverage: f64,
    /// Thin:thick count ratio among masked samples (`inf` = thin only).
    pub thin_thick_ratio: f64,
    /// Procedural base fields generated per kind.
    pub procedural_masks: usize,
    /// Optional directory with `thin/*.png` and `thick/*.png` mask images.
    pub import_dir: Option<PathBuf>,
}

impl Default for CloudSimConfig {
    fn default() -> Self {
        Self {
            image_level_fraction: 0.5,
            per_sample_coverage: 0.5,
            thin_thick_ratio: 1.0,
            procedural_masks: 32,
            import_dir: None,
        }
    }
}

impl CloudSimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_level_fraction", self.image_level_fraction),
            ("per_sample_coverage", self.per_sample_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.image_level_fraction > 0.0 && self.per_sample_coverage == 0.0 {
            return Err(Error::InvalidInput(
                "per_sample_coverage must be > 0 when samples are masked".into(),
            ));
        }
        if self.thin_thick_ratio.is_nan() || self.thin_thick_ratio < 0.0 {
            return Err(Error::InvalidInput(format!(
                "thin_thick_ratio must be >= 0, got {}",
                self.thin_thick_ratio
            )));
        }
        Ok(())
    }

    /// `(thin, thick)` counts among `masked` samples.
    pub fn kind_counts(&self, masked: usize) -> (usize, usize) {
        let r = self.thin_thick_ratio;
        let thin = if r.is_infinite() {
            masked
        } else {
            ((masked as f64) * r / (1.0 + r)).round() as usize
        };
        (thin.min(masked), masked - thin.min(masked))
    }

    /// Builds the library this config describes: procedural fields plus
    /// any imported images.
    pub fn library(&self, seed: u64) -> Result<MaskLibrary> {
        let mut lib = MaskLibrary::procedural(self.procedural_masks, seed);
        if let Some(dir) = &self.import_dir {
            lib.import_dir(dir)?;
        }
        Ok(lib)
    }
}

impl MaskLibrary {
    /// `count` fields per kind built from random Gaussian blobs.
    pub fn procedural(count: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "mask-library");
        let mut field = |blobs: std::ops::Range<usize>| {
            let s = PROCEDURAL_FIELD_SIZE as f64;
            let mut f = Array2::<f32>::zeros((PROCEDURAL_FIELD_SIZE, PROCEDURAL_FIELD_SIZE));
            for _ in 0..rng.random_range(blobs.clone()) {
                let cy = rng.random_range(0.0..s);
                let cx = rng.random_range(0.0..s);
                let sigma = rng.random_range(0.08 * s..0.25 * s);
                let weight = rng.random_range(0.5..1.0);
                f.indexed_iter_mut().for_each(|((y, x), v)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    *v += (weight * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                });
            }
            f
        };
        let thick = (0..count).map(|_| field(2..6)).collect();
        let thin = (0..count).map(|_| field(4..10)).collect();
        Self { thin, thick }
    }

    /// Adds every PNG under `dir/thin` and `dir/thick` as a base field
    /// (luma, brighter = cloudier).
    pub fn import_dir(&mut self, dir: &Path) -> Result<()> {
        for (sub, target) in [("thin", &mut self.thin), ("thick", &mut self.thick)] {
            let d = dir.join(sub);
            if !d.is_dir() {
                continue;
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&d)
                .map_err(|e| Error::io(&d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            for p in paths {
                target.push(load_mask_image(&p)?);
            }
        }
        Ok(())
    }

    fn entries(&self, kind: CloudKind) -> &[Array2<f32>] {
        match kind {
            CloudKind::Thin => &self.thin,
            CloudKind::Thick => &self.thick,
            CloudKind::None => &[],
        }
    }

    /// Draws a mask of the given kind for an `h x w` image whose realized
    /// coverage is `round(coverage * h * w) / (h * w)`.
    pub fn draw<R: Rng>(
        &self,
        kind: CloudKind,
        coverage: f64,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<CloudMask> {
        let entries = self.entries(kind);
        if entries.is_empty() {
            return Err(Error::Config(format!("mask library has no {kind:?} masks")));
        }
        let base = &entries[rng.random_range(0..entries.len())];
        let field = crop_resample(base, h, w, rng);
        let mut n = ((coverage * (h * w) as f64).round() as usize).min(h * w);
        if coverage > 0.0 {
            n = n.max(1);
        }
        let mut order: Vec<usize> = (0..h * w).collect();
        let flat = field.as_slice().unwrap();
        // Brightest pixels first; index breaks ties.
        order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
        let mut alpha = Array2::<f32>::zeros((h, w));
        let chosen = &order[..n];
        match kind {
            CloudKind::Thick => {
                for &i in chosen {
                    alpha[[i / w, i % w]] = 1.0;
                }
            }
            CloudKind::Thin => {
                let lo = chosen.last().map_or(0.0, |&i| flat[i]);
                let hi = chosen.first().map_or(0.0, |&i| flat[i]);
                let span = (hi - lo).max(1e-6);
                for &i in chosen {
                    let t = (flat[i] - lo) / span;
                    alpha[[i / w, i % w]] = THIN_ALPHA_MIN + (THIN_ALPHA_MAX - THIN_ALPHA_MIN) * t;
                }
            }
            CloudKind::None => unreachable!(),
        }
        Ok(CloudMask { alpha, kind })
    }
}

fn load_mask_image(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32).0[0]) / 255.0
    }))
}

/// Random dihedral transform, random crop of at least half the field,
/// bilinear resample to `h x w`.
fn crop_resample<R: Rng>(base: &Array2<f32>, h: usize, w: usize, rng: &mut R) -> Array2<f32> {
    let mut f = base.clone();
    if rng.random_bool(0.5) {
        f = f.reversed_axes();
    }
    if rng.random_bool(0.5) {
        f.invert_axis(Axis(0));
    }
    if rng.random_bool(0.5) {
        f.invert_axis(Axis(1));
    }
    let (bh, bw) = f.dim();
    let ch = rng.random_range(bh.div_ceil(2)..=bh);
    let cw = rng.random_range(bw.div_ceil(2)..=bw);
    let oy = rng.random_range(0..=bh - ch);
    let ox = rng.random_range(0..=bw - cw);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = oy as f32 + (y as f32 + 0.5) * ch as f32 / h as f32 - 0.5;
        let sx = ox as f32 + (x as f32 + 0.5) * cw as f32 / w as f32 - 0.5;
        bilinear(&f, sy, sx)
    })
}

fn bilinear(f: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = f.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = (y - y0 as f32, x - x0 as f32);
    let top = f[[y0, x0]] * (1.0 - dx) + f[[y0, x1]] * dx;
    let bottom = f[[y1, x0]] * (1.0 - dx) + f[[y1, x1]] * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Masks exactly `round(fraction * N)` randomly chosen samples, split
/// between thin and thick by `thin_thick_ratio`. SAR tensors are never
/// touched. Fails if the dataset already carries clouds.
pub fn apply_cloud_masks(
    dataset: &Dataset,
    cfg: &CloudSimConfig,
    library: &MaskLibrary,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if dataset.samples.iter().any(|s| s.cloud.covered) {
        return Err(Error::InvalidInput("dataset is already cloud-masked".into()));
    }
    let n = dataset.len();
    let masked = ((cfg.image_level_fraction * n as f64).round() as usize).min(n);
    let (thin, thick) = cfg.kind_counts(masked);
    if thin > 0 && library.thin.is_empty() {
        return Err(Error::Config("mask library has no thin masks".into()));
    }
    if thick > 0 && library.thick.is_empty() {
        return Err(Error::Config("mask library has no thick masks".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "cloud-select"));

    let mut out = dataset.clone();
    for (rank, &i) in order[..masked].iter().enumerate() {
        let kind = if rank < thin {
            CloudKind::Thin
        } else {
            CloudKind::Thick
        };
        let sample = &mut out.samples[i];
        let mut rng = sample_rng(seed, sample.id, "cloud-mask");
        let mask = library.draw(
            kind,
            cfg.per_sample_coverage,
            dataset.height,
            dataset.width,
            &mut rng,
        )?;
        for mut plane in sample.optical.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&mask.alpha, |p, &a| {
                if a > 0.0 {
                    *p = (1.0 - a) * *p + a;
                }
            });
        }
        let coverage = mask.coverage();
        sample.cloud = if coverage > 0.0 {
            CloudInfo {
                covered: true,
                coverage,
                kind,
            }
        } else {
            CloudInfo::CLEAR
        };
    }
    out.provenance.steps.push(format!(
        "clouds: seed={seed} fraction={} coverage={} thin:thick={} masked={masked} thin={thin} thick={thick}",
        cfg.image_level_fraction, cfg.per_sample_coverage, cfg.thin_thick_ratio
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pairs, GapConfig};

    fn dataset(per_class: usize) -> Dataset {
        generate_synthetic_pairs(
            &GapConfig {
                samples_per_class: per_class,
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    fn cfg(fraction: f64, coverage: f64, ratio: f64) -> CloudSimConfig {
        CloudSimConfig {
            image_level_fraction: fraction,
            per_sample_coverage: coverage,
            thin_thick_ratio: ratio,
            ..Default::default()
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let ds = dataset(5);
        let lib = MaskLibrary::procedural(4, 1);
        let out = apply_cloud_masks(&ds, &cfg(0.0, 0.5, 1.0), &lib, 3).unwrap();
        assert_eq!(out.samples, ds.samples);
        assert!(out.samples.iter().all(|s| s.cloud.coverage == 0.0));
    }

    #[test]
    fn full_thick_occlusion_whitens_optical_only() {
        let ds = dataset(5);
        let lib = MaskLibrary::procedural(4, 1);
        let out = apply_cloud_masks(&ds, &cfg(1.0, 1.0, 0.0), &lib, 3).unwrap();
        for (a, b) in ds.samples.iter().zip(&out.samples) {
            assert!(b.optical.iter().all(|&v| v == 1.0));
            assert_eq!(a.sar, b.sar);
            assert_eq!(b.cloud.kind, CloudKind::Thick);
            assert_eq!(b.cloud.coverage, 1.0);
        }
    }

    #[test]
    fn hundred_samples_half_masked_half_thin() {
        let ds = dataset(25);
        let lib = MaskLibrary::procedural(8, 2);
        let out = apply_cloud_masks(&ds, &cfg(0.5, 0.5, 1.0), &lib, 11).unwrap();
        // Direct recount.
        let masked: Vec<_> = out.samples.iter().filter(|s| s.cloud.covered).collect();
        let thin = masked.iter().filter(|s| s.cloud.kind == CloudKind::Thin).count();
        let thick = masked.iter().filter(|s| s.cloud.kind == CloudKind::Thick).count();
        assert_eq!(masked.len(), 50);
        assert_eq!((thin, thick), (25, 25));
        let mean = masked.iter().map(|s| s.cloud.coverage).sum::<f64>() / 50.0;
        assert!((0.45..=0.55).contains(&mean), "mean coverage {mean}");
        out.validate().unwrap();
    }

    #[test]
    fn thin_masks_are_fractional_thick_binary() {
        let lib = MaskLibrary::procedural(4, 9);
        let mut rng = stream_rng(0, "t");
        let thin = lib.draw(CloudKind::Thin, 0.4, 16, 16, &mut rng).unwrap();
        assert!(thin.alpha.iter().any(|&a| a > 0.0 && a < 1.0));
        assert!(thin.alpha.iter().all(|&a| (0.0..1.0).contains(&a)));
        let thick = lib.draw(CloudKind::Thick, 0.4, 16, 16, &mut rng).unwrap();
        assert!(thick.alpha.iter().all(|&a| a == 0.0 || a == 1.0));
        assert!((thick.coverage() - 102.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn empty_library_is_config_error() {
        let ds = dataset(5);
        let lib = MaskLibrary::default();
        let err = apply_cloud_masks(&ds, &cfg(0.5, 0.5, 1.0), &lib, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn remasking_is_rejected() {
        let ds = dataset(5);
        let lib = MaskLibrary::procedural(4, 1);
        let once = apply_cloud_masks(&ds, &cfg(0.5, 0.5, 1.0), &lib, 1).unwrap();
        assert!(apply_cloud_masks(&once, &cfg(0.5, 0.5, 1.0), &lib, 1).is_err());
    }

    #[test]
    fn imported_png_masks_are_used() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("thick")).unwrap();
        let img = image::GrayImage::from_fn(8, 8, |x, _| image::Luma([(x * 30) as u8]));
        img.save(dir.path().join("thick/a.png")).unwrap();
        let mut lib = MaskLibrary::default();
        lib.import_dir(dir.path()).unwrap();
        assert_eq!(lib.thick.len(), 1);
        assert!(lib.thin.is_empty());
        let mut rng = stream_rng(0, "t");
        let m = lib.draw(CloudKind::Thick, 0.5, 16, 16, &mut rng).unwrap();
        assert_eq!(m.coverage(), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn counts_exact_and_sar_untouched(
                fraction in 0.0f64..=1.0,
                coverage in 0.05f64..=1.0,
                ratio in prop_oneof![Just(0.0), Just(f64::INFINITY), 0.1f64..10.0],
                seed in any::<u64>(),
            ) {
                let ds = dataset(10);
                let lib = MaskLibrary::procedural(3, seed);
                let c = cfg(fraction, coverage, ratio);
                let out = apply_cloud_masks(&ds, &c, &lib, seed).unwrap();
                let n = ds.len();
                let masked = out.samples.iter().filter(|s| s.cloud.covered).count();
                prop_assert_eq!(masked, (fraction * n as f64).round() as usize);
                let thin = out.samples.iter().filter(|s| s.cloud.kind == CloudKind::Thin).count();
                let thick = masked - thin;
                if ratio.is_finite() && ratio > 0.0 {
                    let expected_thin = masked as f64 * ratio / (1.0 + ratio);
                    prop_assert!((thin as f64 - expected_thin).abs() <= 1.0);
                }
                if ratio == 1.0 {
                    prop_assert!(thin.abs_diff(thick) <= 1);
                }
                for (a, b) in ds.samples.iter().zip(&out.samples) {
                    prop_assert_eq!(&a.sar, &b.sar);
                    if b.cloud.covered {
                        prop_assert!((b.cloud.coverage - coverage).abs() <= 0.05);
                    }
                }
            }
        }
    }
}
