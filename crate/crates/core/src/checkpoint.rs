//! Binary checkpoint container.
//!
//! Layout: magic `MRLB`, format version (u32 LE), 32-byte config digest,
//! length-prefixed JSON metadata, then length-prefixed named parameter
//! records (name, shape, 32-bit little-endian values) sorted by name.
//! Encoder checkpoints store one parameter set; learner checkpoints add the
//! key encoder, optimizer buffers, the negative-key queue, and the
//! cursor/step/hyperparameter metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::mococore::MoCoState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MRLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub meta: serde_json::Value,
    pub tensors: ParameterSet<f32>,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    out.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&checkpoint.config_digest).map_err(io_err)?;

    let meta = serde_json::to_vec(&checkpoint.meta)?;
    out.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&meta).map_err(io_err)?;

    out.write_all(&(checkpoint.tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in checkpoint.tensors.iter() {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(name_bytes).map_err(io_err)?;
        out.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

struct Cursor<R: Read> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { inner: BufReader::new(file) };

    let magic = cur.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, want {CHECKPOINT_MAGIC:?}")));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, want {CHECKPOINT_VERSION}"
        )));
    }
    let digest_bytes = cur.bytes(32)?;
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(&digest_bytes);

    let meta_len = cur.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(&cur.bytes(meta_len)?)?;

    let count = cur.u32()? as usize;
    let mut tensors = ParameterSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(Checkpoint { config_digest, meta, tensors })
}

/// Grad participation is structural, not stored: batch-norm running
/// statistics are buffers, everything else is trainable.
fn restore_grad_flags(set: &mut ParameterSet<f32>) {
    for (name, tensor) in set.iter_mut() {
        let buffer = name.ends_with(".running_mean") || name.ends_with(".running_var");
        tensor.set_grad_enabled(!buffer);
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    kind: String,
    encoder: EncoderConfig,
}

pub fn save_encoder(
    path: &Path,
    config: &EncoderConfig,
    params: &EncoderParams<f32>,
    config_digest: [u8; 32],
) -> Result<()> {
    let meta = serde_json::to_value(EncoderMeta { kind: "encoder".into(), encoder: config.clone() })?;
    write_checkpoint(path, &Checkpoint { config_digest, meta, tensors: params.flatten() })
}

pub fn load_encoder(path: &Path) -> Result<(EncoderConfig, EncoderParams<f32>, [u8; 32])> {
    let checkpoint = read_checkpoint(path)?;
    let meta: EncoderMeta = serde_json::from_value(checkpoint.meta.clone())?;
    if meta.kind != "encoder" {
        return Err(Error::Checkpoint(format!("kind `{}`, want encoder", meta.kind)));
    }
    let mut flat = checkpoint.tensors;
    restore_grad_flags(&mut flat);
    Ok((meta.encoder, EncoderParams::from_flat(&flat), checkpoint.config_digest))
}

#[derive(Serialize, Deserialize)]
struct MocoMeta {
    kind: String,
    encoder: EncoderConfig,
    k: usize,
    m: f32,
    tau: f32,
    batch_size: usize,
    cursor: usize,
    step: u64,
}

pub fn save_moco_state(path: &Path, state: &MoCoState, config_digest: [u8; 32]) -> Result<()> {
    let meta = serde_json::to_value(MocoMeta {
        kind: "moco".into(),
        encoder: state.config.clone(),
        k: state.queue.shape()[0],
        m: state.momentum,
        tau: state.temperature,
        batch_size: state.batch_size,
        cursor: state.cursor,
        step: state.step,
    })?;
    let mut tensors = ParameterSet::new();
    tensors.absorb_prefixed("query", &state.query_params.flatten());
    tensors.absorb_prefixed("key", &state.key_params.flatten());
    tensors.absorb_prefixed("optimizer", &state.optimizer_state);
    tensors.set("queue", state.queue.clone());
    write_checkpoint(path, &Checkpoint { config_digest, meta, tensors })
}

pub fn load_moco_state(path: &Path) -> Result<(MoCoState, [u8; 32])> {
    let checkpoint = read_checkpoint(path)?;
    let meta: MocoMeta = serde_json::from_value(checkpoint.meta.clone())?;
    if meta.kind != "moco" {
        return Err(Error::Checkpoint(format!("kind `{}`, want moco", meta.kind)));
    }
    let mut query = checkpoint.tensors.extract_prefixed("query");
    let mut key = checkpoint.tensors.extract_prefixed("key");
    restore_grad_flags(&mut query);
    restore_grad_flags(&mut key);
    let queue = checkpoint
        .tensors
        .get("queue")
        .ok_or_else(|| Error::Checkpoint("missing queue tensor".into()))?
        .clone();
    if queue.shape() != [meta.k, meta.encoder.embed_dim] {
        return Err(Error::Checkpoint(format!(
            "queue shape {:?} does not match K={} embed_dim={}",
            queue.shape(),
            meta.k,
            meta.encoder.embed_dim
        )));
    }
    let state = MoCoState {
        config: meta.encoder,
        query_params: EncoderParams::from_flat(&query),
        key_params: EncoderParams::from_flat(&key),
        queue,
        cursor: meta.cursor,
        momentum: meta.m,
        temperature: meta.tau,
        step: meta.step,
        batch_size: meta.batch_size,
        optimizer_state: checkpoint.tensors.extract_prefixed("optimizer"),
    };
    Ok((state, checkpoint.config_digest))
}

/// Query-encoder view of any checkpoint kind (eval loads either).
pub fn load_eval_encoder(path: &Path) -> Result<(EncoderConfig, EncoderParams<f32>, [u8; 32])> {
    let checkpoint = read_checkpoint(path)?;
    let kind = checkpoint.meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    match kind {
        "encoder" => load_encoder(path),
        "moco" => {
            let (state, digest) = load_moco_state(path)?;
            Ok((state.config, state.query_params, digest))
        }
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
    }
}
