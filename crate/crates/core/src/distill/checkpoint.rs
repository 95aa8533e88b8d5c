//! Binary checkpoints: `MBCK` magic, u32 format version, u64 header length,
//! a JSON header (architecture, channels, classes, role, tensor shapes,
//! optional RNG state), then every tensor as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::learning::{Architecture, Classifier, Encoder, ParamSet, Role};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    in_channels: usize,
    classes: usize,
    role: Role,
    shapes: Vec<Vec<usize>>,
    rng: Option<ChaCha8Rng>,
}

pub fn save_checkpoint(path: &Path, model: &Classifier<f32>, rng: Option<&ChaCha8Rng>) -> Result<()> {
    let header = Header {
        architecture: model.encoder.arch.clone(),
        in_channels: model.in_channels(),
        classes: model.classes,
        role: model.role,
        shapes: model.params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        rng: rng.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &model.params.tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier<f32>, Option<ChaCha8Rng>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.architecture.validate()?;

    let mut rest = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        if rest.len() < 4 * n {
            return Err(corrupt("truncated tensor data"));
        }
        let data: Vec<f32> = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| corrupt(&e.to_string()))?);
        rest = &rest[4 * n..];
    }
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let expected = header.architecture.param_count(header.in_channels, header.classes);
    let encoder = Encoder::new(header.architecture, header.in_channels);
    let model = Classifier {
        encoder,
        classes: header.classes,
        role: header.role,
        params: ParamSet::new(tensors),
    };
    if model.param_count() != expected {
        return Err(corrupt("tensor sizes do not match the architecture"));
    }
    Ok((model, header.rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::stream_rng;
    use rand::RngCore;

    fn model() -> Classifier<f32> {
        Classifier::new(Architecture::default(), 6, 4, Role::Target, &mut stream_rng(1, "m")).unwrap()
    }

    #[test]
    fn round_trip_preserves_params_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let m = model();
        let mut rng = stream_rng(5, "shuffle");
        rng.next_u64();
        save_checkpoint(&p, &m, Some(&rng)).unwrap();
        let (back, r) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        let mut r = r.unwrap();
        assert_eq!(r.next_u64(), rng.next_u64());
    }

    #[test]
    fn corruption_and_version_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &model(), None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Corrupt { .. })));

        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
