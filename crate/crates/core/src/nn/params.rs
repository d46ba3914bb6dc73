//! Named parameter storage with gradient accumulators and EMA shadows,
//! plus the binary checkpoint format.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    ema: Option<Vec<Tensor<S>>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            ema: None,
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        if self.ema.is_some() {
            return Err(Error::contract(
                "cannot register parameters after the EMA shadow was initialized",
            ));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<S>) {
        debug_assert_eq!(self.grads[id.0].shape(), delta.shape());
        self.grads[id.0].add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = S::ZERO;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Global L2 norm of all gradients, in f64.
    pub fn grad_global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = S::from_f64(factor);
        for g in &mut self.grads {
            g.scale_in_place(f);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn has_ema(&self) -> bool {
        self.ema.is_some()
    }

    /// shadow <- decay * shadow + (1 - decay) * param. The first call copies
    /// the current parameters into the shadow.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config(format!(
                "EMA decay must be in [0, 1], got {decay}"
            )));
        }
        match &mut self.ema {
            None => {
                self.ema = Some(self.values.clone());
            }
            Some(shadow) => {
                let d = S::from_f64(decay);
                let omd = S::from_f64(1.0 - decay);
                for (sh, val) in shadow.iter_mut().zip(&self.values) {
                    for (s, &v) in sh.data_mut().iter_mut().zip(val.data()) {
                        *s = d * *s + omd * v;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn ema_value(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.ema.as_ref().map(|e| &e[id.0])
    }

    /// A copy of this store whose live values are the EMA shadow (for
    /// sampling and feature extraction). Falls back to live values when no
    /// shadow exists yet.
    pub fn ema_snapshot(&self) -> ParamStore<S> {
        let values = match &self.ema {
            Some(e) => e.clone(),
            None => self.values.clone(),
        };
        ParamStore {
            names: self.names.clone(),
            grads: values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            values,
            ema: None,
            index: self.index.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "DPRB1", little-endian manifest + raw tensors.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DPRB1";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Manifest {
    config: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

/// Raw checkpoint content: named tensors plus the stored config.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Writes live parameters under `live/<name>`, EMA shadows under
/// `ema/<name>`, and the supplied config into a DPRB1 file.
pub fn save_checkpoint<S: Scalar>(
    store: &ParamStore<S>,
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<Vec<u8>> = Vec::new();
    let mut offset = 0u64;
    let push = |name: String, tensor: &Tensor<S>, entries: &mut Vec<ManifestEntry>, blobs: &mut Vec<Vec<u8>>, offset: &mut u64| {
        let mut bytes = Vec::with_capacity(tensor.numel() * S::byte_width());
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name,
            dtype: Dtype::F32.name().to_string(),
            shape: tensor.shape().to_vec(),
            offset: *offset,
        });
        *offset += bytes.len() as u64;
        blobs.push(bytes);
    };
    for id in store.ids() {
        push(
            format!("live/{}", store.name(id)),
            store.value(id),
            &mut entries,
            &mut blobs,
            &mut offset,
        );
    }
    if store.has_ema() {
        for id in store.ids() {
            push(
                format!("ema/{}", store.name(id)),
                store.ema_value(id).expect("ema present"),
                &mut entries,
                &mut blobs,
                &mut offset,
            );
        }
    }
    let manifest = Manifest {
        config: config.clone(),
        entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::contract(format!("manifest: {e}")))?;

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(CHECKPOINT_MAGIC)
        .and_then(|_| file.write_all(&(manifest_bytes.len() as u32).to_le_bytes()))
        .and_then(|_| file.write_all(&manifest_bytes))
        .and_then(|_| {
            for blob in &blobs {
                file.write_all(blob)?;
            }
            Ok(())
        })
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {magic:?}, expected DPRB1"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let manifest_len = u32::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("manifest parse: {e}"),
    })?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;

    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.dtype != "f32" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported dtype '{}' for '{}'", entry.dtype, entry.name),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > data.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("tensor '{}' exceeds file size", entry.name),
            });
        }
        let mut values = Vec::with_capacity(numel);
        for chunk in data[start..end].chunks_exact(4) {
            values.push(f32::from_le_slice(chunk));
        }
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, values)?));
    }
    Ok(Checkpoint {
        config: manifest.config,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<f32>)]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (name, data) in values {
            let shape = [data.len()];
            s.register(name, Tensor::from_vec(&shape, data.clone()).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn ema_endpoints() {
        let mut s = store_with(&[("w", vec![2.0, 4.0])]);
        s.ema_update(0.999).unwrap(); // first call copies
        assert_eq!(s.ema_value(ParamId(0)).unwrap().data(), &[2.0, 4.0]);

        // decay = 1 leaves the shadow unchanged
        s.value_mut(ParamId(0)).data_mut()[0] = 100.0;
        s.ema_update(1.0).unwrap();
        assert_eq!(s.ema_value(ParamId(0)).unwrap().data(), &[2.0, 4.0]);

        // decay = 0 snaps the shadow to the current values
        s.ema_update(0.0).unwrap();
        assert_eq!(s.ema_value(ParamId(0)).unwrap().data(), &[100.0, 4.0]);
    }

    #[test]
    fn ema_midpoint() {
        let mut s = store_with(&[("w", vec![2.0])]);
        s.ema_update(0.5).unwrap();
        // shadow = 2; set param to 0 and blend: 0.5*2 + 0.5*0 = 1
        s.value_mut(ParamId(0)).data_mut()[0] = 0.0;
        s.ema_update(0.5).unwrap();
        assert_eq!(s.ema_value(ParamId(0)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.dprb");
        let mut s = store_with(&[("a.w", vec![1.5, -2.5, 3.25]), ("b.b", vec![0.125])]);
        s.ema_update(0.9).unwrap();
        let cfg = serde_json::json!({"image_size": 32});
        save_checkpoint(&s, &cfg, &path).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config["image_size"], 32);
        assert_eq!(ck.tensor("live/a.w").unwrap().data(), &[1.5, -2.5, 3.25]);
        assert_eq!(ck.tensor("ema/a.w").unwrap().data(), &[1.5, -2.5, 3.25]);
        assert_eq!(ck.tensor("live/b.b").unwrap().data(), &[0.125]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.register("w", Tensor::zeros(&[2])).is_err());
    }
}
