//! Named parameter storage shared by the encoders, the MAE decoder and the
//! optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Named copies of every tensor whose name starts with `prefix`.
    pub fn export_prefix(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite tensors by name. Every tensor in `tensors` must already exist
    /// with the same shape; tensors whose name lacks `prefix` are rejected.
    pub fn load_named(&mut self, prefix: &str, tensors: &[(String, Array2<f64>)]) -> Result<()> {
        let expected = self.entries.iter().filter(|e| e.name.starts_with(prefix)).count();
        let mut seen = 0;
        for (name, value) in tensors {
            if !name.starts_with(prefix) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` outside expected prefix `{prefix}`"
                )));
            }
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let slot = self.value_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(value);
            seen += 1;
        }
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {seen} tensors under `{prefix}`, model has {expected}"
            )));
        }
        Ok(())
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}
