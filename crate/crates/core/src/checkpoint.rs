//! Checkpoint directories: `params.bin`, `vocab.txt` and `manifest.json`.
//!
//! `params.bin` (little-endian): magic `LPDGPRM1`, u64 tensor count, then per
//! tensor a u64 name length, the UTF-8 name, u64 rows, u64 cols and
//! rows·cols f64 values.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::generator::{ModelConfig, Seq2SeqModel};
use crate::retriever::{EncoderConfig, TextEncoder};
use crate::vocab::Vocab;

const PARAMS_MAGIC: &[u8; 8] = b"LPDGPRM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Retriever,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub stage: u8,
    pub steps: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    /// Full model configuration.
    pub config: serde_json::Value,
    /// Retriever parameter version (0 for generators).
    #[serde(default)]
    pub version: u64,
}

pub fn write_params(path: &Path, ps: &ParamSet) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + ps.numel() * 8);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(ps.len() as u64).to_le_bytes());
    for (name, t) in ps.names().iter().zip(ps.tensors()) {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Overwrites `ps` with the tensors in `path`; names and shapes must match.
pub fn read_params(path: &Path, ps: &mut ParamSet) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated file"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u64 = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
    let count = read_u64(take(8)?);
    if count != ps.len() {
        return Err(bad(&format!("{count} tensors, model has {}", ps.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u64(take(8)?);
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != ps.name(i) {
            return Err(bad(&format!("tensor {i} is `{name}`, expected `{}`", ps.name(i))));
        }
        let rows = read_u64(take(8)?);
        let cols = read_u64(take(8)?);
        if (rows, cols) != ps.get(i).dim() {
            return Err(bad(&format!(
                "tensor `{name}` has shape {rows}x{cols}, expected {:?}",
                ps.get(i).dim()
            )));
        }
        let values: Vec<f64> = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(Array2::from_shape_vec((rows, cols), values).expect("shape checked"));
    }
    for (t, v) in ps.tensors_mut().iter_mut().zip(loaded) {
        *t = v;
    }
    Ok(())
}

fn write_dir(dir: &Path, ps: &ParamSet, vocab: &Vocab, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_params(&dir.join("params.bin"), ps)?;
    vocab.save(dir.join("vocab.txt"))?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    Ok(serde_json::from_slice(
        &fs::read(&path).map_err(|e| Error::io(&path, e))?,
    )?)
}

fn read_common(dir: &Path, kind: ModelKind) -> Result<(CheckpointManifest, Arc<Vocab>)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint",
            dir.display(),
            manifest.kind
        )));
    }
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with manifest".into()));
    }
    Ok((manifest, Arc::new(vocab)))
}

pub fn save_generator(dir: impl AsRef<Path>, model: &Seq2SeqModel, stage: u8, steps: usize) -> Result<()> {
    let c = model.config();
    let manifest = CheckpointManifest {
        kind: ModelKind::Generator,
        stage,
        steps,
        vocab_size: model.vocab().len(),
        d_model: c.d_model,
        max_source_len: c.max_source_len,
        max_target_len: c.max_target_len,
        config: serde_json::to_value(c)?,
        version: 0,
    };
    write_dir(dir.as_ref(), model.params(), model.vocab(), &manifest)
}

pub fn load_generator(dir: impl AsRef<Path>) -> Result<(Seq2SeqModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let (manifest, vocab) = read_common(dir, ModelKind::Generator)?;
    let config: ModelConfig = serde_json::from_value(manifest.config.clone())?;
    let mut model = Seq2SeqModel::new(config, vocab, 0);
    read_params(&dir.join("params.bin"), model.params_mut())?;
    Ok((model, manifest))
}

pub fn save_retriever(dir: impl AsRef<Path>, enc: &TextEncoder, stage: u8, steps: usize) -> Result<()> {
    let c = enc.config();
    let manifest = CheckpointManifest {
        kind: ModelKind::Retriever,
        stage,
        steps,
        vocab_size: enc.vocab().len(),
        d_model: c.d_model,
        max_source_len: c.max_len,
        max_target_len: 0,
        config: serde_json::to_value(c)?,
        version: enc.version(),
    };
    write_dir(dir.as_ref(), enc.params(), enc.vocab(), &manifest)
}

pub fn load_retriever(dir: impl AsRef<Path>) -> Result<(TextEncoder, CheckpointManifest)> {
    let dir = dir.as_ref();
    let (manifest, vocab) = read_common(dir, ModelKind::Retriever)?;
    let config: EncoderConfig = serde_json::from_value(manifest.config.clone())?;
    let mut enc = TextEncoder::new(config, vocab, 0);
    read_params(&dir.join("params.bin"), enc.params_mut())?;
    enc.set_version(manifest.version);
    Ok((enc, manifest))
}
