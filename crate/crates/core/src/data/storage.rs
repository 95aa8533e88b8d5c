//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/opt/shard-00000.bin   raw little-endian f32, samples back to back
//! <dir>/sar/shard-00000.bin
//! ```
//!
//! Every shard file's SHA-256 is recorded in the manifest.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CloudInfo, Dataset, Provenance, SceneSample, Split, OPTICAL_CHANNELS};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const SHARD_SIZE: usize = 256;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub optical_channels: usize,
    pub sar_channels: usize,
    pub provenance: Provenance,
    pub shards: Vec<ShardRecord>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardRecord {
    pub optical: String,
    pub sar: String,
    pub optical_sha256: String,
    pub sar_sha256: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub label: Option<usize>,
    pub split: Option<Split>,
    pub cloud: CloudInfo,
    pub shard: usize,
    pub offset: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    dataset.validate()?;
    for sub in ["opt", "sar"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut shards = Vec::new();
    let mut samples = Vec::with_capacity(dataset.len());
    for (shard, chunk) in dataset.samples.chunks(SHARD_SIZE).enumerate() {
        let mut opt = Vec::new();
        let mut sar = Vec::new();
        for (offset, s) in chunk.iter().enumerate() {
            opt.extend(s.optical.iter().flat_map(|v| v.to_le_bytes()));
            sar.extend(s.sar.iter().flat_map(|v| v.to_le_bytes()));
            samples.push(SampleRecord {
                id: s.id,
                label: s.label,
                split: s.split,
                cloud: s.cloud,
                shard,
                offset,
            });
        }
        let record = ShardRecord {
            optical: format!("opt/shard-{shard:05}.bin"),
            sar: format!("sar/shard-{shard:05}.bin"),
            optical_sha256: sha256_hex(&opt),
            sar_sha256: sha256_hex(&sar),
            count: chunk.len(),
        };
        write_file(&dir.join(&record.optical), &opt)?;
        write_file(&dir.join(&record.sar), &sar)?;
        shards.push(record);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        class_names: dataset.class_names.clone(),
        height: dataset.height,
        width: dataset.width,
        optical_channels: OPTICAL_CHANNELS,
        sar_channels: dataset.sar_channels,
        provenance: dataset.provenance.clone(),
        shards,
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Loads and validates a dataset directory. Missing shard files, checksum
/// failures and version mismatches are reported as distinct errors.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt {
            path: path.clone(),
            reason: "missing format_version".into(),
        })? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(raw)?;
    if manifest.optical_channels != OPTICAL_CHANNELS {
        return Err(Error::Corrupt {
            path,
            reason: format!("optical_channels = {}", manifest.optical_channels),
        });
    }

    let (h, w) = (manifest.height, manifest.width);
    let opt_len = OPTICAL_CHANNELS * h * w;
    let sar_len = manifest.sar_channels * h * w;
    let mut shard_data = Vec::with_capacity(manifest.shards.len());
    for (si, shard) in manifest.shards.iter().enumerate() {
        let first_id = manifest
            .samples
            .iter()
            .find(|r| r.shard == si)
            .map_or(0, |r| r.id);
        let opt = read_shard(dir, &shard.optical, &shard.optical_sha256, first_id)?;
        let sar = read_shard(dir, &shard.sar, &shard.sar_sha256, first_id)?;
        for (name, data, per) in [(&shard.optical, &opt, opt_len), (&shard.sar, &sar, sar_len)] {
            if data.len() != shard.count * per {
                return Err(Error::Corrupt {
                    path: dir.join(name),
                    reason: format!("expected {} floats, found {}", shard.count * per, data.len()),
                });
            }
        }
        shard_data.push((opt, sar));
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for r in &manifest.samples {
        let (opt, sar) = shard_data.get(r.shard).ok_or_else(|| Error::Corrupt {
            path: dir.join(MANIFEST),
            reason: format!("sample {} references unknown shard {}", r.id, r.shard),
        })?;
        if r.offset >= manifest.shards[r.shard].count {
            return Err(Error::Corrupt {
                path: dir.join(MANIFEST),
                reason: format!("sample {} offset out of range", r.id),
            });
        }
        let o = &opt[r.offset * opt_len..(r.offset + 1) * opt_len];
        let s = &sar[r.offset * sar_len..(r.offset + 1) * sar_len];
        samples.push(SceneSample {
            id: r.id,
            optical: Array3::from_shape_vec((OPTICAL_CHANNELS, h, w), o.to_vec()).unwrap(),
            sar: Array3::from_shape_vec((manifest.sar_channels, h, w), s.to_vec()).unwrap(),
            label: r.label,
            cloud: r.cloud,
            split: r.split,
        });
    }
    let dataset = Dataset {
        class_names: manifest.class_names.clone(),
        height: h,
        width: w,
        sar_channels: manifest.sar_channels,
        provenance: manifest.provenance.clone(),
        samples,
    };
    dataset.validate()?;
    Ok((manifest, dataset))
}

fn read_shard(dir: &Path, rel: &str, sha: &str, first_id: u64) -> Result<Vec<f32>> {
    let path = dir.join(rel);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile {
                path,
                sample_id: first_id,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if sha256_hex(&bytes) != sha {
        return Err(Error::Checksum { path });
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt {
            path,
            reason: "length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes 8-bit RGB previews of the first `limit` optical images. Viewing
/// aid only; never read back.
pub fn export_png_previews(dataset: &Dataset, dir: &Path, limit: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in dataset.samples.iter().take(limit) {
        let img = image::RgbImage::from_fn(dataset.width as u32, dataset.height as u32, |x, y| {
            let px = |c: usize| (s.optical[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("{:06}_opt.png", s.id));
        img.save(&path).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}
