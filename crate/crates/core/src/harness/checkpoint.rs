//! Versioned binary checkpoint: magic, format version, a JSON header with the
//! model config and run fingerprint, then every parameter as little-endian
//! `f64` in store order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AmsfNet, ModelConfig};

pub const MAGIC: &[u8; 8] = b"AMSFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub model: ModelConfig,
    /// Training episodes completed when the parameters were captured.
    pub episode: usize,
    pub val_accuracy: Option<f64>,
    pub params: Vec<ParamShape>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: AmsfNet,
}

impl Checkpoint {
    pub fn new(net: AmsfNet, fingerprint: impl Into<String>, episode: usize, val_accuracy: Option<f64>) -> Self {
        let params = net
            .store
            .iter()
            .map(|(_, name, v)| ParamShape {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                fingerprint: fingerprint.into(),
                model: net.config.clone(),
                episode,
                val_accuracy,
                params,
            },
            net,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for (_, _, v) in self.net.store.iter() {
            for &x in v.iter() {
                w.write_f64::<LittleEndian>(x).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let short = |e: std::io::Error| Error::Checkpoint(format!("truncated: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(short)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(short)?;
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut buf = vec![0u8; len as usize];
        r.read_exact(&mut buf).map_err(short)?;
        let header: CheckpointHeader = serde_json::from_slice(&buf)?;
        let mut net = AmsfNet::new(header.model.clone(), 0)?;
        let ids: Vec<_> = net.store.ids().collect();
        if ids.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "header lists {} parameters, model has {}",
                header.params.len(),
                ids.len()
            )));
        }
        for (id, shape) in ids.into_iter().zip(&header.params) {
            let name = net.store.name(id).to_string();
            let value = net.store.get_mut(id);
            if name != shape.name || value.dim() != (shape.rows, shape.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {}x{} does not match model `{name}` {:?}",
                    shape.name,
                    shape.rows,
                    shape.cols,
                    value.dim()
                )));
            }
            for x in value.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(short)?;
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(short)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
