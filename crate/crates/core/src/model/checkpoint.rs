//! Binary checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, every tensor as little-endian `f64` in header order, and a SHA-256
//! of everything before it. Files are written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::Mat;
use super::transformer::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DOTNMTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// Free-form metadata plus a list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Checkpoint {
    pub fn from_params(meta: serde_json::Value, params: &ModelParams) -> Self {
        Self {
            meta,
            names: params.names().to_vec(),
            tensors: params.tensors().to_vec(),
        }
    }

    /// Appends tensors under `prefix.` names.
    pub fn push_group(&mut self, prefix: &str, names: &[String], tensors: &[Mat]) {
        for (n, t) in names.iter().zip(tensors) {
            self.names.push(format!("{prefix}.{n}"));
            self.tensors.push(t.clone());
        }
    }

    /// Tensors whose names start with `prefix.`, in order, with the prefix removed.
    pub fn group(&self, prefix: &str) -> (Vec<String>, Vec<Mat>) {
        let p = format!("{prefix}.");
        self.names
            .iter()
            .zip(&self.tensors)
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .unzip()
    }

    /// Tensors with no group prefix matching one of `groups`.
    pub fn params(&self, groups: &[&str]) -> Result<ModelParams> {
        let (names, tensors) = self
            .names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| !groups.iter().any(|g| n.starts_with(&format!("{g}."))))
            .map(|(n, t)| (n.clone(), t.clone()))
            .unzip();
        ModelParams::new(names, tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = self.tensors.iter().map(Mat::len).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * floats + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file is truncated or corrupt)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20 + hlen)
            .ok_or_else(|| bad("header overruns file"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut data = &body[20 + hlen..];
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            if data.len() < 8 * n {
                return Err(bad("tensor data overruns file"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            tensors.push(
                Mat::from_shape_vec((info.rows, info.cols), values)
                    .map_err(|e| bad(&e.to_string()))?,
            );
            names.push(info.name);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            meta: header.meta,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Element-wise mean of parameter sets sharing one layout.
pub fn average_params(sets: &[ModelParams]) -> Result<ModelParams> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    if sets.iter().any(|s| !s.same_layout(first)) {
        return Err(Error::Checkpoint(
            "cannot average checkpoints with different layouts".into(),
        ));
    }
    let n = sets.len() as f64;
    let tensors = (0..first.len())
        .map(|i| {
            let mut acc = Mat::zeros(first.tensors()[i].raw_dim());
            for s in sets {
                acc += &s.tensors()[i];
            }
            acc / n
        })
        .collect();
    ModelParams::new(first.names().to_vec(), tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let p = ModelParams::new(
            vec!["a".into(), "b".into()],
            vec![array![[1.0, -2.5], [3.0, 1e-300]], array![[f64::MAX]]],
        )
        .unwrap();
        let mut c = Checkpoint::from_params(serde_json::json!({"step": 7}), &p);
        c.push_group("adam.m", p.names(), p.tensors());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params(&["adam.m"]).unwrap().names(), ["a", "b"]);
        let (names, _) = back.group("adam.m");
        assert_eq!(names, ["a", "b"]);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn averaging() {
        let p = |x: f64| ModelParams::new(vec!["w".into()], vec![array![[x, 2.0 * x]]]).unwrap();
        let avg = average_params(&[p(1.0), p(2.0), p(6.0)]).unwrap();
        assert_eq!(avg.tensors()[0], array![[3.0, 6.0]]);
        let q = ModelParams::new(vec!["v".into()], vec![array![[1.0, 1.0]]]).unwrap();
        assert!(average_params(&[p(1.0), q]).is_err());
        assert!(average_params(&[]).is_err());
    }
}
