use std::path::Path;

use crate::bev::{EMBEDDING_DIM, POINT_FEATURES};
use crate::error::{Error, Result};
use crate::raster::write_atomic;
use crate::tensor::Tensor;

use super::model::{ModelConfig, ModelParams, TENSOR_NAMES};

const MAGIC: &[u8; 8] = b"MCOSTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every tensor as `(name, shape, little-endian f64 data)`.
///
/// Layout: magic, `u32` version, `u64` max points, `u64` tensor count, then
/// per tensor a `u64`-length name, `u64` rank, `u64` dims and the values.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.max_points as u64).to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible {what} {v}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let max_points = r.len("max points")?;
    let count = r.len("tensor count")?;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len("name length")?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.len("rank")?;
        let shape = (0..rank)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= bytes.len() / 8);
        let len =
            len.ok_or_else(|| Error::Format(format!("tensor {name} is larger than the file")))?;
        let data = r
            .take(8 * len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    let find = |name: &str| {
        loaded
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let dim = |name: &str, axis: usize| -> Result<usize> {
        find(name)?
            .shape
            .get(axis)
            .copied()
            .ok_or_else(|| Error::Format(format!("tensor {name} has too few axes")))
    };
    let cfg = ModelConfig {
        channels: dim("pillar.weight", 0)?,
        stage3_channels: dim("stage3.weight", 0)?,
        stage4_channels: dim("stage4.weight", 0)?,
        film_hidden: dim("film3.hidden.weight", 0)?,
        head_channels: dim("head.weight", 0)?,
        max_points,
    };
    let mut params = ModelParams::zeros(&cfg);
    for (name, slot) in params.tensors_mut() {
        let t = find(name)?;
        if t.shape != slot.shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t.clone();
    }
    if let Some((n, _)) = loaded
        .iter()
        .find(|(n, _)| !TENSOR_NAMES.contains(&n.as_str()))
    {
        return Err(Error::Format(format!("unknown tensor {n}")));
    }
    debug_assert_eq!(params.pillar.inputs(), POINT_FEATURES);
    debug_assert_eq!(params.film3.hidden.inputs(), EMBEDDING_DIM);
    params.check().map_err(|e| Error::Format(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            channels: 3,
            stage3_channels: 5,
            stage4_channels: 2,
            film_hidden: 4,
            head_channels: 6,
            max_points: 7,
        };
        let mut p = ModelParams::init(&cfg, 11);
        p.output.bias.data[0] = -0.0;
        p.head.weight.data[0] = f64::MIN_POSITIVE / 3.0;
        let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(q.config(), cfg);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(q.tensors()) {
            assert_eq!(a.shape, b.shape);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = ModelParams::init(&ModelConfig::default(), 1);
        let bytes = encode_checkpoint(&p);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Format(_))));
        let mut v = bytes;
        v.push(0);
        assert!(matches!(decode_checkpoint(&v), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = ModelParams::init(&ModelConfig::default(), 2);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
