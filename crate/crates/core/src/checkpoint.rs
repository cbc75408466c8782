//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, JSON
//! header (config, tensor names and shapes, metadata), then raw LE f64
//! blobs in header order: parameters, buffers, optimizer first moments,
//! optimizer second moments. Everything is keyed and ordered by tensor
//! name, so saving the same state twice produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::network::{build_network, NetworkConfig, SegNetwork};
use crate::nn::Visit;

const MAGIC: &[u8; 8] = b"SSEGCKPT";
const VERSION: u32 = 1;

/// Adam moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which training stage produced this state ("pretrain", "finetune", ...).
    pub stage: String,
    pub epoch: usize,
    pub best_val_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub buffers: BTreeMap<String, ArrayD<f64>>,
    pub optimizer: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    optimizer_m: Vec<TensorEntry>,
    optimizer_v: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> SegError {
    SegError::checkpoint(format!("{}: {msg}", path.display()))
}

fn entries(map: &BTreeMap<String, ArrayD<f64>>) -> Vec<TensorEntry> {
    map.iter()
        .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
        .collect()
}

fn write_blob(w: &mut impl Write, t: &ArrayD<f64>, path: &Path) -> Result<()> {
    for v in t.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(|e| ckpt_err(path, e))?;
    }
    Ok(())
}

fn read_blob(r: &mut impl Read, entry: &TensorEntry, path: &Path) -> Result<ArrayD<f64>> {
    let n: usize = entry.shape.iter().product();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(
            r.read_f64::<LittleEndian>()
                .map_err(|_| ckpt_err(path, format!("truncated blob for {}", entry.name)))?,
        );
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
        .map_err(|e| ckpt_err(path, format!("{}: {e}", entry.name)))
}

/// Snapshot a network (plus optional optimizer state) to disk.
pub fn save_checkpoint(
    path: &Path,
    net: &mut SegNetwork,
    optimizer: Option<&OptimizerState>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let ckpt = Checkpoint {
        config: net.config.clone(),
        params: net.param_map(),
        buffers: net.buffer_map(),
        optimizer: optimizer.cloned(),
        meta: meta.clone(),
    };
    write_checkpoint(path, &ckpt)
}

/// Serialize an in-memory checkpoint. Tensor order follows the sorted
/// name maps, so equal checkpoints produce identical files.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let optimizer = ckpt.optimizer.as_ref();
    let header = Header {
        config: ckpt.config.clone(),
        params: entries(&ckpt.params),
        buffers: entries(&ckpt.buffers),
        optimizer_step: optimizer.map(|o| o.step),
        optimizer_m: optimizer.map(|o| entries(&o.m)).unwrap_or_default(),
        optimizer_v: optimizer.map(|o| entries(&o.v)).unwrap_or_default(),
        meta: ckpt.meta.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| ckpt_err(path, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| ckpt_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| ckpt_err(path, e))?;
    w.write_u32::<LittleEndian>(VERSION).map_err(|e| ckpt_err(path, e))?;
    w.write_u64::<LittleEndian>(header_json.len() as u64).map_err(|e| ckpt_err(path, e))?;
    w.write_all(&header_json).map_err(|e| ckpt_err(path, e))?;
    for (_, t) in &ckpt.params {
        write_blob(&mut w, t, path)?;
    }
    for (_, t) in &ckpt.buffers {
        write_blob(&mut w, t, path)?;
    }
    if let Some(o) = optimizer {
        for (_, t) in &o.m {
            write_blob(&mut w, t, path)?;
        }
        for (_, t) in &o.v {
            write_blob(&mut w, t, path)?;
        }
    }
    w.flush().map_err(|e| ckpt_err(path, e))?;
    Ok(())
}

/// Load a checkpoint. Rejects wrong magic, unknown versions, and truncation.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| ckpt_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ckpt_err(path, e))?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| ckpt_err(path, e))?;
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(|e| ckpt_err(path, e))? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| ckpt_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ckpt_err(path, format!("header: {e}")))?;
    let mut params = BTreeMap::new();
    for e in &header.params {
        params.insert(e.name.clone(), read_blob(&mut r, e, path)?);
    }
    let mut buffers = BTreeMap::new();
    for e in &header.buffers {
        buffers.insert(e.name.clone(), read_blob(&mut r, e, path)?);
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut m = BTreeMap::new();
            for e in &header.optimizer_m {
                m.insert(e.name.clone(), read_blob(&mut r, e, path)?);
            }
            let mut v = BTreeMap::new();
            for e in &header.optimizer_v {
                v.insert(e.name.clone(), read_blob(&mut r, e, path)?);
            }
            Some(OptimizerState { step, m, v })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| ckpt_err(path, e))? != 0 {
        return Err(ckpt_err(path, "trailing bytes after declared blobs"));
    }
    Ok(Checkpoint { config: header.config, params, buffers, optimizer, meta: header.meta })
}

/// Rebuild a network from a loaded checkpoint. Every stored tensor must
/// match the architecture the stored config builds.
pub fn restore_network(ckpt: &Checkpoint) -> Result<SegNetwork> {
    let mut net = build_network(&ckpt.config, 0)?;
    let mut problems = Vec::new();
    net.visit_params("", &mut |name, p| match ckpt.params.get(name) {
        Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
        Some(t) => problems.push(format!(
            "{name}: stored shape {:?} vs built {:?}",
            t.shape(),
            p.value.shape()
        )),
        None => problems.push(format!("{name}: missing from checkpoint")),
    });
    net.visit_buffers("", &mut |name, b| match ckpt.buffers.get(name) {
        Some(t) if t.shape() == b.shape() => b.assign(t),
        Some(t) => problems.push(format!(
            "{name}: stored shape {:?} vs built {:?}",
            t.shape(),
            b.shape()
        )),
        None => problems.push(format!("{name}: missing from checkpoint")),
    });
    let mut expected = 0;
    net.visit_params("", &mut |_, _| expected += 1);
    if ckpt.params.len() != expected {
        problems.push(format!(
            "checkpoint holds {} parameters, architecture has {expected}",
            ckpt.params.len()
        ));
    }
    if problems.is_empty() {
        Ok(net)
    } else {
        Err(SegError::checkpoint(format!("incompatible checkpoint: {}", problems.join("; "))))
    }
}
