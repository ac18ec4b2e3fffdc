//! Checkpoint files: magic "CAVMCKPT", u32 version, a JSON manifest
//! (config snapshot, step counter, per-tensor name/shape/offset, optional
//! optimizer state), then a little-endian float32 payload. Writes go to a
//! temp file in the target directory and are renamed into place, so an
//! interrupted write never leaves a partial checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::train::init_full_model;

const MAGIC: &[u8; 8] = b"CAVMCKPT";
const FORMAT_VERSION: u32 = 1;

/// Optional serialized optimizer: first/second moment vectors per
/// parameter, in manifest order, plus the Adam step counter.
#[derive(Clone)]
pub struct SavedOptimizer<T: Scalar> {
    pub step_count: u64,
    /// `(name, m, v)` per parameter.
    pub moments: Vec<(String, Vec<T>, Vec<T>)>,
}

pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub step: u64,
    pub store: ParamStore<T>,
    pub optimizer: Option<SavedOptimizer<T>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OptimizerEntry {
    step_count: u64,
    /// `(name, m_offset, v_offset)`; lengths follow the tensor shapes.
    moments: Vec<(String, usize, usize)>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    dtype: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    step: u64,
    store: &ParamStore<T>,
    optimizer: Option<&SavedOptimizer<T>>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(t.data().iter().map(|v| v.to_f64() as f32));
    }
    let optimizer_entry = match optimizer {
        None => None,
        Some(opt) => {
            let mut entries = Vec::new();
            for (name, m, v) in &opt.moments {
                let m_offset = payload.len();
                payload.extend(m.iter().map(|x| x.to_f64() as f32));
                let v_offset = payload.len();
                payload.extend(v.iter().map(|x| x.to_f64() as f32));
                entries.push((name.clone(), m_offset, v_offset));
            }
            Some(OptimizerEntry { step_count: opt.step_count, moments: entries })
        }
    };
    let manifest = Manifest {
        config: *config,
        step,
        dtype: "f32".into(),
        tensors,
        optimizer: optimizer_entry,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;

    let tmp = path.with_extension("ckpt-tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for v in &payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and validate: every tensor name and shape must match what
/// `init_full_model` registers for the stored config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let manifest_len = u32::from_le_bytes(word) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut payload_bytes = Vec::new();
    r.read_to_end(&mut payload_bytes)?;
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::Format("payload length not a multiple of 4".into()));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    // expected layout for this config
    let mut expected: ParamStore<T> = ParamStore::new();
    let mut scratch_rng = SplitMix64::new(0);
    init_full_model(&mut expected, &mut scratch_rng, &manifest.config)?;
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config defines {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut store: ParamStore<T> = ParamStore::new();
    let mut sizes = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let want = expected.get(&entry.name).map_err(|_| {
            Error::Format(format!("unexpected tensor '{}' in checkpoint", entry.name))
        })?;
        if want.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{}' has shape {:?}, config requires {:?}",
                entry.name,
                entry.shape,
                want.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor '{}' exceeds payload", entry.name)));
        }
        let data: Vec<T> = payload[entry.offset..end].iter().map(|&v| T::from_f64(v)).collect();
        store.set_raw(&entry.name, &entry.shape, data)?;
        sizes.insert(entry.name.clone(), n);
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            let mut moments = Vec::new();
            for (name, mo, vo) in &opt.moments {
                let n = *sizes.get(name).ok_or_else(|| {
                    Error::Format(format!("optimizer references unknown tensor '{name}'"))
                })?;
                if mo + n > payload.len() || vo + n > payload.len() {
                    return Err(Error::Format("optimizer moments exceed payload".into()));
                }
                let m: Vec<T> = payload[*mo..mo + n].iter().map(|&v| T::from_f64(v)).collect();
                let v: Vec<T> = payload[*vo..vo + n].iter().map(|&v| T::from_f64(v)).collect();
                moments.push((name.clone(), m, v));
            }
            Some(SavedOptimizer { step_count: opt.step_count, moments })
        }
    };

    Ok(Checkpoint { config: manifest.config, step: manifest.step, store, optimizer })
}
