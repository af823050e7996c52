//! `ADVD` dataset and `ADVM` checkpoint files.
//!
//! Both formats are little-endian, store reals as binary64 and end with a
//! SHA-256 digest of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{ArchitectureSpec, ModelParams, NamedTensor, Recipe};

pub const DATASET_MAGIC: &[u8; 4] = b"ADVD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADVM";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Path of the JSON metadata written next to a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    split: String,
    source_hash: String,
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Spec(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(28 + ds.inputs.len() * 8 + ds.len() * 2 + DIGEST_LEN);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, ds.len())?;
    put_u32(&mut buf, ds.classes)?;
    for &s in &ds.shape {
        put_u32(&mut buf, s)?;
    }
    for v in &ds.inputs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::Spec(format!("label {y} exceeds u16")))?;
        buf.extend_from_slice(&y.to_le_bytes());
    }
    Ok(seal(buf))
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)?;
    let meta = DatasetMeta {
        split: ds.split.clone(),
        source_hash: ds.source_hash.clone(),
    };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)
}

/// Sequential little-endian reader over a checksum-verified body.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(corrupt(path, "file too short"));
        }
        if &bytes[..4] != magic {
            return Err(corrupt(path, "bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| corrupt(self.path, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(corrupt(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn corrupt(path: &Path, detail: &str) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let mut r = Reader::open(bytes, path, DATASET_MAGIC)?;
    let n = r.usize()?;
    let classes = r.usize()?;
    let shape = [r.usize()?, r.usize()?, r.usize()?];
    let d = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
    let total = d
        .and_then(|d| d.checked_mul(n))
        .ok_or_else(|| corrupt(path, "header overflow"))?;
    let inputs = r.f64s(total)?;
    let labels = r
        .take(n * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    r.finish()?;
    LabeledDataset::new(shape, classes, inputs, labels, "external", "")
        .map_err(|e| corrupt(path, &e.to_string()))
}

/// Loads a dataset; metadata comes from the JSON sidecar when present.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = decode_dataset(&bytes, path)?;
    let side = sidecar_path(path);
    if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&raw)?;
        ds.split = meta.split;
        ds.source_hash = meta.source_hash;
    } else {
        ds.source_hash = ds.hash();
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    arch: ArchitectureSpec,
    seed: u64,
    recipe: Recipe,
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let config = serde_json::to_vec(&CheckpointConfig {
        arch: params.arch.clone(),
        seed: params.seed,
        recipe: params.recipe,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, config.len())?;
    buf.extend_from_slice(&config);
    put_u32(&mut buf, params.tensors.len())?;
    for t in &params.tensors {
        put_u32(&mut buf, t.name.len())?;
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(&mut buf, t.shape.len())?;
        for &s in &t.shape {
            put_u32(&mut buf, s)?;
        }
    }
    for t in &params.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(buf))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader::open(bytes, path, CHECKPOINT_MAGIC)?;
    let len = r.usize()?;
    let config: CheckpointConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| corrupt(path, &format!("config: {e}")))?;
    let count = r.usize()?;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.usize()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| corrupt(path, "tensor name is not utf-8"))?;
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n = shape.iter().product();
        tensors.push(NamedTensor {
            name,
            data: r.f64s(n)?,
            shape,
        });
    }
    r.finish()?;
    let params = ModelParams {
        arch: config.arch,
        tensors,
        seed: config.seed,
        recipe: config.recipe,
    };
    params
        .check_shapes()
        .map_err(|e| corrupt(path, &e.to_string()))?;
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::models::{forward_probs, init_model};

    fn tiny_dataset() -> LabeledDataset {
        let inputs = (0..3 * 4).map(|i| i as f64 / 11.0).collect();
        LabeledDataset::new([1, 2, 2], 3, inputs, vec![0, 2, 1], "train", "abc").unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.advd");
        let mut ds = tiny_dataset();
        ds.inputs[0] = 0.1 + 0.2;
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.inputs[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&tiny_dataset()).unwrap();
        assert_eq!(&bytes[..4], b"ADVD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 28 + 12 * 8 + 3 * 2 + 32);
    }

    #[test]
    fn truncated_and_flipped_files_are_corrupt() {
        let bytes = encode_dataset(&tiny_dataset()).unwrap();
        let p = Path::new("x");
        for cut in [0, 10, bytes.len() - 1] {
            assert!(matches!(
                decode_dataset(&bytes[..cut], p),
                Err(Error::CorruptFile { .. })
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_dataset(&flipped, p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = encode_dataset(&tiny_dataset()).unwrap();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let bytes = seal(bytes);
        assert!(matches!(
            decode_dataset(&bytes, Path::new("x")),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.advm");
        let spec = ArchitectureSpec::cnn_s([1, 16, 16], 10);
        let params = init_model(&spec, 9, Recipe::Sam).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.hash(), params.hash());
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i % 7) as f64 / 7.0).collect())
            .unwrap();
        let a = forward_probs(&params, &x).unwrap();
        let b = forward_probs(&back, &x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let spec = ArchitectureSpec::linear([1, 2, 2], 2);
        let bytes = encode_checkpoint(&init_model(&spec, 0, Recipe::Sgd).unwrap()).unwrap();
        let res = decode_checkpoint(&bytes[..bytes.len() - 5], Path::new("m"));
        assert!(matches!(res, Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn write_atomic_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
