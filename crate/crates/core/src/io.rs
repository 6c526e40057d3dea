//! On-disk formats: SQTN tensors, checkpoint directories and dataset
//! directories.
//!
//! SQTN layout: magic `SQTN`, `u8` version (1), `u8` dtype (0 = f32,
//! 1 = f64), `u8` rank, `rank × u64` extents, then the row-major payload.
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Module;
use crate::tensor::Tensor;
use crate::training::Dataset;

pub const MAGIC: &[u8; 4] = b"SQTN";
pub const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

pub fn write_sqtn<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype.code(), t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => t.data().iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        Dtype::F32 => t
            .data()
            .iter()
            .try_for_each(|&v| w.write_all(&(v as f32).to_le_bytes()))?,
    }
    w.flush()?;
    Ok(())
}

/// Reads one tensor; f32 payloads are widened to f64.
pub fn read_sqtn<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("missing SQTN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported SQTN version {}", head[4])));
    }
    let dtype = Dtype::from_code(head[5])?;
    let rank = head[6] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        let e = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflows usize".into()))?;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(e);
    }
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let bytes = numel
        .checked_mul(width)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {bytes}",
            payload.len()
        )));
    }
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated SQTN header".into())
    } else {
        Error::Io(e)
    }
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_sqtn(BufWriter::new(fs::File::create(path)?), t, dtype)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let t = read_sqtn(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after tensor",
            path.display()
        )));
    }
    Ok(t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: Dtype,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "seqkit-checkpoint";

/// Writes `manifest.json` plus one SQTN file per parameter into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut result = Ok(());
    model.visit("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let file = format!("{name}.sqtn");
        result = save_tensor(&dir.join(&file), &p.value, dtype);
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: p.value.shape().to_vec(),
        });
    });
    result?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dtype,
        config: model.config().clone(),
        tensors: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            m.format, m.version
        )));
    }
    Ok(m)
}

/// Rebuilds the model from the stored config and fills every parameter.
/// Missing, extra or mis-shaped tensors are errors.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = load_manifest(dir)?;
    let mut model = Model::new(&manifest.config, 0)?;
    let mut by_name: std::collections::BTreeMap<&str, &ManifestEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut result = Ok(());
    model.visit_mut("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        result = match by_name.remove(name) {
            None => Err(Error::Format(format!("checkpoint lacks tensor '{name}'"))),
            Some(e) => load_tensor(&dir.join(&e.file)).and_then(|t| {
                if t.shape() != p.value.shape() {
                    Err(Error::Format(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                } else {
                    p.value = t;
                    Ok(())
                }
            }),
        };
    });
    result?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown tensor '{extra}'")));
    }
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    label: usize,
}

/// Writes `index.csv` (`path,label`) and one `[H, W, C]` SQTN image per sample.
pub fn save_dataset(dir: &Path, data: &Dataset, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("index.csv"))?;
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let path = format!("img_{i:05}.sqtn");
        save_tensor(&dir.join(&path), img, dtype)?;
        w.serialize(IndexRow { path, label })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory. Image paths are relative to `dir`; the class
/// count is one more than the largest label unless `num_classes` is given.
pub fn load_dataset(dir: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(dir.join("index.csv"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize() {
        let row: IndexRow = row?;
        let path: PathBuf = dir.join(&row.path);
        let img = load_tensor(&path)?;
        if img.rank() != 3 {
            return Err(Error::Format(format!(
                "{}: expected an [H, W, C] image",
                path.display()
            )));
        }
        images.push(img);
        labels.push(row.label);
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(images, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Tensor {
        Tensor::randn(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let t = sample();
        let mut buf = Vec::new();
        write_sqtn(&mut buf, &t, Dtype::F64).unwrap();
        assert_eq!(&buf[..4], b"SQTN");
        assert_eq!(buf[4..7], [1, 1, 3]);
        assert_eq!(u64::from_le_bytes(buf[7..15].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 7 + 3 * 8 + 24 * 8);
        let back = read_sqtn(&buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn f32_round_trip_rounds() {
        let t = sample();
        let mut buf = Vec::new();
        write_sqtn(&mut buf, &t, Dtype::F32).unwrap();
        assert_eq!(buf.len(), 7 + 3 * 8 + 24 * 4);
        let back = read_sqtn(&buf[..]).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn scalar_round_trip() {
        let mut buf = Vec::new();
        write_sqtn(&mut buf, &Tensor::scalar(2.5), Dtype::F64).unwrap();
        assert_eq!(read_sqtn(&buf[..]).unwrap().item(), 2.5);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut buf = Vec::new();
        write_sqtn(&mut buf, &sample(), Dtype::F64).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_sqtn(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[5] = 9;
        assert!(matches!(read_sqtn(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_sqtn(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_sqtn(&buf[..3]), Err(Error::Format(_))));
    }
}
