//! Named parameter storage, tape binding, and the flat weight-file format.
//!
//! A weight file is a pair `<stem>.json` (manifest) + `<stem>.bin` (all
//! tensors as little-endian `f32`, concatenated in manifest order).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Index;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn count(&self, filter: impl Fn(&Param<T>) -> bool) -> usize {
        self.entries.iter().filter(|p| filter(p)).map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf; only trainable ones request gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|p| tape.leaf_shared(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Same values in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Flat copy of every parameter value, for bit-exact comparisons.
    pub fn snapshot(&self, filter: impl Fn(&Param<T>) -> bool) -> Vec<T> {
        self.entries
            .iter()
            .filter(|p| filter(p))
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients of trainable parameters that were reached by the backward sweep.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| grads.get(v).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}

impl<'t, T: Scalar> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// offset into the binary file, in elements
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub const WEIGHTS_FORMAT: &str = "dualrd-weights-v1";

/// `<stem>.json` and `<stem>.bin` for a weight-file stem.
pub fn weight_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    let s = s.strip_suffix(".json").or_else(|| s.strip_suffix(".bin")).unwrap_or(&s);
    (PathBuf::from(format!("{s}.json")), PathBuf::from(format!("{s}.bin")))
}

pub fn save_weights<T: Scalar>(
    stem: &Path,
    tensors: &[(String, &Tensor<T>)],
    config_hash: Option<String>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let (json_path, bin_path) = weight_paths(stem);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: WEIGHTS_FORMAT.into(),
        dtype: "f32".into(),
        config_hash,
        metadata,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_weights<T: Scalar>(stem: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let (json_path, bin_path) = weight_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if manifest.format != WEIGHTS_FORMAT || manifest.dtype != "f32" {
        return Err(Error::format(
            &json_path,
            format!("unsupported format {} / {}", manifest.format, manifest.dtype),
        ));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&bin_path, "length is not a multiple of 4"));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::format(&bin_path, format!("tensor {} exceeds the data file", e.name))
        })?;
        let t = Tensor::new(e.shape.clone(), slice.iter().map(|&v| T::of(v as f64)).collect())?;
        out.push((e.name.clone(), t));
    }
    Ok((manifest, out))
}

impl<T: Scalar> ParamStore<T> {
    /// Overwrites every stored parameter whose name appears in `tensors`.
    /// Returns how many were replaced.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)], prefix: &str) -> Result<usize> {
        let mut replaced = 0;
        for (name, t) in tensors {
            if let Some(id) = self.id(&format!("{prefix}{name}")) {
                self.set(id, t.clone())?;
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}
