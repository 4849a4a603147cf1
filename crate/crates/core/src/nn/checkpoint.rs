//! Binary checkpoint format.
//!
//! ```text
//! "SSPF" 0x01 count:u32
//! count × { name_len:u16 name:utf8 rank:u8 dims:rank×u32 data:f32×numel }
//! meta_len:u32 meta:utf8-json-object
//! ```
//! All integers and floats are little-endian. Tensor names are
//! `<graph>/<parameter>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use super::graph::ModuleGraph;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSPF";
const VERSION: u8 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Raw tensors and metadata read from a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub metadata: Map<String, Value>,
}

impl Checkpoint {
    pub fn from_graphs(graphs: &[(&str, &ModuleGraph)], metadata: Map<String, Value>) -> Self {
        let mut tensors = Vec::new();
        for (gname, g) in graphs {
            for p in g.entries() {
                let data = p.value.data().iter().map(|&v| v as f32).collect();
                tensors.push((format!("{gname}/{}", p.name), p.value.shape().to_vec(), data));
            }
        }
        Checkpoint { tensors, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| ck(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            let rank = u8::try_from(shape.len()).map_err(|_| ck("tensor rank exceeds 255"))?;
            out.push(rank);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&Value::Object(self.metadata.clone()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != VERSION {
            return Err(ck("bad checkpoint header"));
        }
        let mut r = Reader { bytes, pos: 5 };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ck("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| ck("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, shape, data));
        }
        let len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(len)?)?;
        let Value::Object(metadata) = meta else {
            return Err(ck("checkpoint metadata is not a JSON object"));
        };
        if r.pos != bytes.len() {
            return Err(ck("trailing bytes after checkpoint metadata"));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Copies stored values into the given skeletons. Every stored tensor
    /// must be claimed and every skeleton entry must be present with the
    /// same shape.
    pub fn load_into(&self, graphs: &mut [(&str, &mut ModuleGraph)]) -> Result<()> {
        let mut stored: BTreeMap<&str, (&[usize], &[f32])> = BTreeMap::new();
        for (name, shape, data) in &self.tensors {
            if stored.insert(name, (shape, data)).is_some() {
                return Err(ck(format!("duplicate tensor {name} in checkpoint")));
            }
        }
        // Check everything before touching any graph.
        for (gname, g) in graphs.iter() {
            for p in g.entries() {
                let key = format!("{gname}/{}", p.name);
                match stored.get(key.as_str()) {
                    None => return Err(ck(format!("checkpoint is missing tensor {key}"))),
                    Some((shape, _)) if *shape != p.value.shape() => {
                        return Err(ck(format!(
                            "shape mismatch for {key}: stored {shape:?}, graph {:?}",
                            p.value.shape()
                        )))
                    }
                    _ => {}
                }
            }
        }
        let mut claimed = 0;
        for (gname, g) in graphs.iter_mut() {
            for p in g.entries_mut() {
                let key = format!("{gname}/{}", p.name);
                let (_, data) = stored[key.as_str()];
                for (dst, &src) in p.value.data_mut().iter_mut().zip(data) {
                    *dst = src as f64;
                }
                claimed += 1;
            }
        }
        if claimed != stored.len() {
            let known: Vec<String> = graphs
                .iter()
                .flat_map(|(gname, g)| g.entries().into_iter().map(move |p| format!("{gname}/{}", p.name)))
                .collect();
            let unknown = stored.keys().find(|k| !known.iter().any(|n| n == *k)).unwrap();
            return Err(ck(format!("unknown tensor {unknown} in checkpoint")));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes `graphs` and `metadata` to `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, graphs: &[(&str, &ModuleGraph)], metadata: Map<String, Value>) -> Result<()> {
    Checkpoint::from_graphs(graphs, metadata).write(path)
}

/// Loads `path` into the given skeletons and returns the metadata.
pub fn load_checkpoint(path: impl AsRef<Path>, graphs: &mut [(&str, &mut ModuleGraph)]) -> Result<Map<String, Value>> {
    let ck = Checkpoint::read(path)?;
    ck.load_into(graphs)?;
    Ok(ck.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_backbone, build_mlp_head, BackboneConfig, FinalActivation};
    use serde_json::json;

    fn meta(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = build_backbone(&BackboneConfig::default(), 4).unwrap();
        let h = build_mlp_head(&[64, 4], FinalActivation::None, 5).unwrap();
        let bytes = Checkpoint::from_graphs(&[("backbone", &g), ("head", &h)], meta(json!({"epoch": 3}))).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut g2 = build_backbone(&BackboneConfig::default(), 40).unwrap();
        let mut h2 = build_mlp_head(&[64, 4], FinalActivation::None, 50).unwrap();
        ck.load_into(&mut [("backbone", &mut g2), ("head", &mut h2)]).unwrap();
        for (a, b) in g.entries().into_iter().zip(g2.entries()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        for (a, b) in h.entries().into_iter().zip(h2.entries()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(ck.metadata["epoch"], json!(3));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let h = build_mlp_head(&[4, 2], FinalActivation::None, 5).unwrap();
        let mut bytes = Checkpoint::from_graphs(&[("h", &h)], Map::new()).to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(truncated).is_err());
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad checkpoint header");
    }

    #[test]
    fn structural_mismatch_fails() {
        let h = build_mlp_head(&[4, 2], FinalActivation::None, 5).unwrap();
        let ck = Checkpoint::from_graphs(&[("h", &h)], Map::new());
        let mut wrong = build_mlp_head(&[4, 3], FinalActivation::None, 5).unwrap();
        assert!(ck.load_into(&mut [("h", &mut wrong)]).is_err());
        let mut renamed = build_mlp_head(&[4, 2], FinalActivation::None, 5).unwrap();
        assert!(ck.load_into(&mut [("other", &mut renamed)]).is_err());
        let mut bigger = build_mlp_head(&[4, 2], FinalActivation::None, 5).unwrap();
        let ck2 = Checkpoint::from_graphs(&[("h", &h), ("extra", &h)], Map::new());
        let err = ck2.load_into(&mut [("h", &mut bigger)]).unwrap_err();
        assert!(err.to_string().contains("unknown tensor"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model");
        let h = build_mlp_head(&[4, 2], FinalActivation::None, 5).unwrap();
        save_checkpoint(&path, &[("h", &h)], meta(json!({"task": "x"}))).unwrap();
        let mut h2 = build_mlp_head(&[4, 2], FinalActivation::None, 6).unwrap();
        let m = load_checkpoint(&path, &mut [("h", &mut h2)]).unwrap();
        assert_eq!(m["task"], json!("x"));
        assert_eq!(h.entries()[0].value.data(), h2.entries()[0].value.data());
    }
}
