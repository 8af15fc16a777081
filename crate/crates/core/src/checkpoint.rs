//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SSALCKPT"
//! version    u32 length + UTF-8
//! arch       u32 length + JSON text of the ArchSpec
//! meta       u32 length + JSON object of string -> string
//! count      u32
//! tensor*    u32 name length + UTF-8 name
//!            u8 dtype length + dtype tag ("f64")
//!            u32 rank, then rank x u64 dims
//!            row-major element bytes (8 per f64)
//! ```
//!
//! Values are written with `to_le_bytes`, so `load(save(x)) == x` bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSALCKPT";
pub const FORMAT_VERSION: &str = "selfsal-checkpoint/1";
const DTYPE_F64: &str = "f64";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: String,
    pub arch: ArchSpec,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(arch: ArchSpec) -> Self {
        Self {
            version: FORMAT_VERSION.to_string(),
            arch,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// A checkpoint holding one model's parameters under their plain names.
    pub fn from_model(state: &ModelState) -> Self {
        let mut c = Self::new(state.arch.clone());
        c.tensors = state.params.clone();
        c
    }

    pub fn insert_state(&mut self, prefix: &str, state: &ModelState) {
        for (name, t) in &state.params {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Extracts the model stored under `prefix/`, or under plain names when
    /// `prefix` is empty.
    pub fn state(&self, prefix: &str) -> Result<ModelState> {
        let params: BTreeMap<String, Tensor> = if prefix.is_empty() {
            self.tensors
                .iter()
                .filter(|(n, _)| !n.contains('/'))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect()
        } else {
            let p = format!("{prefix}/");
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        ModelState::from_params(self.arch.clone(), params)
    }

    /// The network used for inference: the student of a training
    /// checkpoint, or the plain model of an exported one.
    pub fn inference_state(&self) -> Result<ModelState> {
        if self.tensors.keys().any(|k| k.starts_with("student/")) {
            self.state("student")
        } else {
            self.state("")
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, &self.version);
        let arch = serde_json::to_string(&self.arch).map_err(|e| Error::Format(e.to_string()))?;
        put_str(&mut out, &arch);
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(DTYPE_F64.len() as u8);
            out.extend_from_slice(DTYPE_F64.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = get_str(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version:?}")));
        }
        let arch: ArchSpec = serde_json::from_str(&get_str(&mut r)?)
            .map_err(|e| Error::Format(format!("arch: {e}")))?;
        let meta: BTreeMap<String, String> = serde_json::from_str(&get_str(&mut r)?)
            .map_err(|e| Error::Format(format!("meta: {e}")))?;
        let count = get_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let mut len = [0u8; 1];
            r.read_exact(&mut len).map_err(|_| truncated())?;
            let mut dtype = vec![0u8; len[0] as usize];
            r.read_exact(&mut dtype).map_err(|_| truncated())?;
            if dtype != DTYPE_F64.as_bytes() {
                return Err(Error::Format(format!(
                    "tensor {name}: unsupported element type {:?}",
                    String::from_utf8_lossy(&dtype)
                )));
            }
            let rank = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| truncated())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(truncated());
            }
            let (raw, rest) = r.split_at(n * 8);
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = rest;
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            version,
            arch,
            meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> Error {
    Error::Format("truncated checkpoint".into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err(truncated());
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let state = ModelState::init(ArchSpec::desk(20), 3).unwrap();
        let mut c = Checkpoint::new(state.arch.clone());
        c.insert_state("student", &state);
        c.insert_state("teacher", &state);
        c.tensors.insert(
            "center".into(),
            Tensor::from_vec(&[3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        c.meta.insert("epoch".into(), "4".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        let s = back.state("student").unwrap();
        for (name, t) in &state.params {
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s.params[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        assert_eq!(back.inference_state().unwrap(), state);
        assert_eq!(
            back.tensor("center").unwrap().data()[0].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn plain_model_checkpoint() {
        let state = ModelState::init(ArchSpec::desk(4), 1).unwrap();
        let c = Checkpoint::from_model(&state);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.inference_state().unwrap(), state);
    }

    #[test]
    fn rejects_corruption() {
        let state = ModelState::init(ArchSpec::desk(4), 1).unwrap();
        let bytes = Checkpoint::from_model(&state).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
