//! Named parameter storage with seeded initialization and a flat checkpoint
//! format (raw little-endian `f32` blob plus a JSON manifest).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

/// Ordered map of trainable variables. Initialization draws from a ChaCha
/// stream keyed by the parameter name, so values do not depend on the
/// order in which layers are constructed.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    portrait_core::seed::derive_seed(seed, name, 0)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::Incompatible(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let u = Uniform::new_inclusive(-b, b).expect("valid bounds");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// `out × in` weight (stored like `candle_nn::Linear`) and optional bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool, zero: bool) -> Result<Linear> {
        let init = if zero { Init::Zeros } else { Init::FanIn(d_in) };
        let w = self.get_or_init(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let b = if bias {
            let binit = if zero { Init::Zeros } else { Init::FanIn(d_in) };
            Some(self.get_or_init(&format!("{name}.bias"), &[d_out], binit)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter with seeded Gaussian noise. Used by tests
    /// that need a network with no zero-initialized paths.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        for (name, var) in &self.vars {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
            let d = Normal::new(0.0, std).expect("valid std");
            let vals: Vec<f64> = (0..var.elem_count()).map(|_| d.sample(&mut rng)).collect();
            let t = Tensor::from_vec(vals, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Flattened parameter values in name order.
    pub fn flat_f32(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for var in self.vars.values() {
            out.extend(var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    pub fn save(&self, blob: &Path, manifest_path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 * self.num_scalars());
        let mut tensors = BTreeMap::new();
        for (name, var) in &self.vars {
            let offset = bytes.len();
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: var.dims().to_vec(),
                    dtype: "f32".into(),
                    offset,
                },
            );
        }
        fs::write(blob, &bytes).map_err(|e| ModelError::io(blob, e))?;
        let manifest = CheckpointManifest {
            blob: blob
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors,
            extra,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::json(manifest_path, e))?;
        fs::write(manifest_path, text).map_err(|e| ModelError::io(manifest_path, e))
    }

    /// Loads values for every parameter in the store. Extra checkpoint
    /// entries are ignored; missing or reshaped parameters are errors.
    pub fn load(&self, manifest_path: &Path) -> Result<CheckpointManifest> {
        let manifest = CheckpointManifest::read(manifest_path)?;
        let blob_path = manifest.blob_path(manifest_path);
        let bytes = fs::read(&blob_path).map_err(|e| ModelError::io(&blob_path, e))?;
        for (name, var) in &self.vars {
            let entry = manifest
                .tensors
                .get(name)
                .ok_or_else(|| ModelError::Incompatible(format!("checkpoint has no parameter {name}")))?;
            if entry.shape != var.dims() || entry.dtype != "f32" {
                return Err(ModelError::Incompatible(format!(
                    "parameter {name}: checkpoint {:?} {}, model {:?}",
                    entry.shape,
                    entry.dtype,
                    var.dims()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(entry.offset..entry.offset + 4 * n)
                .ok_or_else(|| ModelError::Incompatible(format!("blob truncated at {name}")))?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(vals, entry.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ModelError::json(path, e))
    }

    pub fn blob_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path
            .parent()
            .map(|p| p.join(&self.blob))
            .unwrap_or_else(|| PathBuf::from(&self.blob))
    }
}
