//! Checkpoint directories: a `manifest.txt` of `key = value` lines plus one
//! little-endian `f32` blob per parameter.
//!
//! ```text
//! format = comhom-checkpoint
//! version = 1
//! meta.fold = 3
//! param.encoder.stem.weight.shape = 32,8,7
//! param.encoder.stem.weight.dtype = f32
//! param.encoder.stem.weight.file = encoder.stem.weight.bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{NnError, ParameterSet, Tensor};

const MANIFEST: &str = "manifest.txt";

fn io_err(path: &Path, e: std::io::Error) -> NnError {
    NnError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Write `params` and string metadata under `dir` (created if missing).
pub fn save_checkpoint(dir: &Path, params: &ParameterSet<f32>, meta: &BTreeMap<String, String>) -> Result<(), NnError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::from("format = comhom-checkpoint\nversion = 1\n");
    for (k, v) in meta {
        if k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(NnError::Checkpoint(format!("metadata key {k:?} not representable")));
        }
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    for (name, p) in params.iter() {
        let file = format!("{name}.bin");
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("param.{name}.shape = {}\n", shape.join(",")));
        manifest.push_str(&format!("param.{name}.dtype = f32\n"));
        manifest.push_str(&format!("param.{name}.file = {file}\n"));
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ParameterSet<f32>, BTreeMap<String, String>), NnError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NnError::Checkpoint(format!("{}: malformed line {line:?}", path.display())))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    if kv.get("format").map(String::as_str) != Some("comhom-checkpoint") {
        return Err(NnError::Checkpoint(format!("{}: not a checkpoint manifest", path.display())));
    }
    let mut meta = BTreeMap::new();
    let mut params = ParameterSet::new();
    for (k, v) in &kv {
        if let Some(m) = k.strip_prefix("meta.") {
            meta.insert(m.to_string(), v.clone());
        }
        let Some(name) = k.strip_prefix("param.").and_then(|r| r.strip_suffix(".shape")) else { continue };
        let shape = v
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Checkpoint(format!("{name}: bad shape {v:?}: {e}")))?;
        let dtype = kv.get(&format!("param.{name}.dtype")).map(String::as_str);
        if dtype != Some("f32") {
            return Err(NnError::Checkpoint(format!("{name}: unsupported dtype {dtype:?}")));
        }
        let file = kv
            .get(&format!("param.{name}.file"))
            .ok_or_else(|| NnError::Checkpoint(format!("{name}: missing file entry")))?;
        let blob_path = dir.join(file);
        let bytes = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
        let expected: usize = shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(NnError::Checkpoint(format!(
                "{}: expected {} bytes, found {}",
                blob_path.display(),
                expected * 4,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((params, meta))
}
