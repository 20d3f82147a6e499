//! `RAFT` tensor containers and the JSON parameter manifest.
//!
//! Container layout, all little-endian:
//!
//! ```text
//! b"RAFT" | u32 version (=1) | u32 rank | rank × u64 extents | f64 payload (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RAFT";
pub const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!("truncated container while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected RAFT".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(&mut buf, 4, "rank")?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(&mut buf, 8, "extent")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let bytes_needed = shape
        .iter()
        .try_fold(8usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    if buf.len() != bytes_needed {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {bytes_needed}",
            buf.len()
        )));
    }
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(Error::at(path))?;
    f.write_all(&encode_tensor(t)).map_err(Error::at(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::at(path))?;
    decode_tensor(&bytes)
}

/// One serialized tensor inside a layer entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub role: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub orientations: usize,
    pub k_in: usize,
    pub k_out: usize,
    pub kernel_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub layers: Vec<LayerEntry>,
}

impl Manifest {
    pub fn new() -> Self {
        Self {
            format: "raft".into(),
            version: VERSION,
            config: None,
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, name: &str) -> Result<&LayerEntry> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Format(format!("manifest has no layer `{name}`")))
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Collects tensors for a manifest directory: each tensor goes to
/// `<layer>.<role>.raft`.
pub struct ManifestWriter<'a> {
    dir: &'a Path,
    pub manifest: Manifest,
}

impl<'a> ManifestWriter<'a> {
    pub fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
        Ok(Self {
            dir,
            manifest: Manifest::new(),
        })
    }

    pub fn push_layer(&mut self, mut layer: LayerEntry, tensors: &[(&str, &Tensor)]) -> Result<()> {
        for (role, t) in tensors {
            let file = format!("{}.{}.raft", layer.name, role);
            write_tensor(self.dir.join(&file), t)?;
            layer.tensors.push(TensorEntry {
                role: (*role).to_owned(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        self.manifest.layers.push(layer);
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(Error::at(&path))?;
        Ok(self.manifest)
    }
}

pub struct ManifestReader<'a> {
    dir: &'a Path,
    pub manifest: Manifest,
}

impl<'a> ManifestReader<'a> {
    pub fn open(dir: &'a Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(Error::at(&path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(Self { dir, manifest })
    }

    pub fn tensor(&self, layer: &str, role: &str) -> Result<Tensor> {
        let entry = self.manifest.layer(layer)?;
        let te = entry
            .tensors
            .iter()
            .find(|t| t.role == role)
            .ok_or_else(|| Error::Format(format!("layer `{layer}` has no tensor `{role}`")))?;
        let t = read_tensor(self.dir.join(&te.file))?;
        if t.shape() != te.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: shape {:?} disagrees with manifest {:?}",
                te.file,
                t.shape(),
                te.shape
            )));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"RAFT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::zeros(&[2, 2]);
        let mut b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_tensor(&b).is_err());
        let mut v = encode_tensor(&t);
        v[4] = 2;
        assert!(decode_tensor(&v).is_err());
    }

    #[test]
    fn manifest_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let w = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let mut wr = ManifestWriter::new(dir.path()).unwrap();
        wr.push_layer(
            LayerEntry {
                name: "stem".into(),
                kind: "lift_conv".into(),
                orientations: 4,
                k_in: 3,
                k_out: 2,
                kernel_size: 3,
                reduction: None,
                channels: None,
                tensors: vec![],
            },
            &[("weight", &w)],
        )
        .unwrap();
        wr.finish().unwrap();
        let rd = ManifestReader::open(dir.path()).unwrap();
        assert_eq!(rd.tensor("stem", "weight").unwrap(), w);
        assert!(rd.tensor("stem", "bias").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let t = Tensor::uniform(&shape, -1e3, 1e3, &mut rng);
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
