//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (schema, model config, dictionaries, block table), then every
//! block's values as little-endian `f64` in block-table order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dictionaries;
use crate::embedding::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Params;
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 8] = b"HMDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub codebooks_initialized: bool,
    pub dictionaries: Option<Dictionaries>,
    pub blocks: Vec<BlockEntry>,
}

impl CheckpointHeader {
    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }
}

pub fn header_of(model: &Model) -> CheckpointHeader {
    CheckpointHeader {
        schema: model.schema.clone(),
        config: model.config.clone(),
        codebooks_initialized: model.quantizer.as_ref().is_some_and(|q| q.initialized),
        dictionaries: model.dictionaries.clone(),
        blocks: model
            .blocks()
            .into_iter()
            .map(|(name, m)| BlockEntry {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    }
}

pub fn write_checkpoint<W: Write>(model: &Model, mut writer: W) -> Result<()> {
    let header = serde_json::to_vec(&header_of(model))?;
    writer.write_all(MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writer.write_all(&(header.len() as u64).to_le_bytes())?;
    writer.write_all(&header)?;
    for (_, m) in model.blocks() {
        let mut buf = Vec::with_capacity(m.len() * 8);
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn read_exact<R: Read>(reader: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

/// Reads and validates the header, leaving `reader` at the parameter data.
pub fn read_header<R: Read>(reader: &mut R) -> Result<CheckpointHeader> {
    let magic = read_exact(reader, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(reader, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(read_exact(reader, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let raw = read_exact(reader, len, "header")?;
    let mut header: CheckpointHeader =
        serde_json::from_slice(&raw).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    if let Some(d) = &mut header.dictionaries {
        d.rebuild();
    }
    Ok(header)
}

/// Fills `model`'s blocks from `reader`. The block table must match the
/// model's layout exactly.
fn read_blocks<R: Read>(model: &mut Model, table: &[BlockEntry], reader: &mut R) -> Result<()> {
    let mut blocks = model.blocks_mut();
    if blocks.len() != table.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter blocks, model expects {}",
            table.len(),
            blocks.len()
        )));
    }
    for (entry, (name, m)) in table.iter().zip(blocks.iter_mut()) {
        if entry.name != *name {
            return Err(Error::Checkpoint(format!(
                "block `{}` found where model expects `{name}`",
                entry.name
            )));
        }
        if (entry.rows, entry.cols) != m.shape() {
            return Err(Error::Checkpoint(format!(
                "block `{name}` has shape {}x{} in the checkpoint, model expects {}x{}",
                entry.rows,
                entry.cols,
                m.rows(),
                m.cols()
            )));
        }
    }
    for (entry, (_, m)) in table.iter().zip(blocks.iter_mut()) {
        let raw = read_exact(reader, entry.rows * entry.cols * 8, &format!("block `{}`", entry.name))?;
        for (dst, chunk) in m.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut reader: R) -> Result<Model> {
    let header = read_header(&mut reader)?;
    // weights are overwritten below; the RNG only shapes the skeleton
    let mut model = Model::new(header.schema.clone(), header.config.clone(), &mut SeededRng::new(0))?;
    read_blocks(&mut model, &header.blocks, &mut reader)?;
    if let Some(q) = &mut model.quantizer {
        q.initialized = header.codebooks_initialized;
    }
    model.dictionaries = header.dictionaries;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

/// Loads parameters into an existing model, rejecting any mismatch of
/// schema, config or block layout.
pub fn load_into(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut reader = bytes.as_slice();
    let header = read_header(&mut reader)?;
    if header.config != model.config {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has {:?}, model has {:?}",
            header.config, model.config
        )));
    }
    let mut staged = model.clone();
    read_blocks(&mut staged, &header.blocks, &mut reader)?;
    if header.schema != model.schema {
        return Err(Error::Checkpoint("feature schema differs from the model's".into()));
    }
    if let Some(q) = &mut staged.quantizer {
        q.initialized = header.codebooks_initialized;
    }
    staged.dictionaries = header.dictionaries;
    *model = staged;
    Ok(())
}
