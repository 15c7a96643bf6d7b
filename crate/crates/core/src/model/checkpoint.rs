//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `UMACKPT\0`, `u32` version, `u64` header
//! length and a JSON header, `u32` array count, then per array a `u32` name
//! length, the UTF-8 name, `u32` rank, `u64` extents and the values as `f64`.
//! Array names are `group.parameter`; the model weights live in group
//! `param`, other groups (optimizer moments) are free-form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numcore::{Array, Scalar};

const MAGIC: &[u8; 8] = b"UMACKPT\0";
pub const VERSION: u32 = 1;
const PARAM_GROUP: &str = "param";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Caller state such as the step counter or the run configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ParamStore<T>,
    /// Additional parameter-shaped stores keyed by group name.
    pub groups: BTreeMap<String, ParamStore<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, extra: serde_json::Value) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config().clone(),
                extra,
            },
            params: model.params().clone(),
            groups: BTreeMap::new(),
        }
    }

    pub fn into_model(self) -> Result<Model<T>> {
        Model::from_params(self.header.model, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), path)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut arrays: Vec<(String, &Array<T>)> = Vec::new();
        for (name, a) in self.params.iter() {
            arrays.push((format!("{PARAM_GROUP}.{name}"), a));
        }
        for (group, store) in &self.groups {
            for (name, a) in store.iter() {
                arrays.push((format!("{group}.{name}"), a));
            }
        }
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, a) in arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.ndim() as u32).to_le_bytes())?;
            for &e in a.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in a.data() {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |d: String| Error::format("checkpoint", d);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let len = read_u64(r).map_err(io)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        let count = read_u32(r).map_err(io)?;
        let mut params = ParamStore::new();
        let mut groups: BTreeMap<String, ParamStore<T>> = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(io)? as usize;
            if !(1..=3).contains(&rank) {
                return Err(bad(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r).map_err(io)? as usize);
            }
            let total: usize = shape.iter().product();
            let mut data = Vec::with_capacity(total);
            let mut buf = [0u8; 8];
            for _ in 0..total {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(T::of(f64::from_le_bytes(buf)));
            }
            let array = Array::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            let (group, pname) = name
                .split_once('.')
                .ok_or_else(|| bad(format!("array name {name} has no group")))?;
            if group == PARAM_GROUP {
                params.insert(pname, array);
            } else {
                groups.entry(group.to_string()).or_default().insert(pname, array);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, params, groups })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
