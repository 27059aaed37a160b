use indexmap::IndexMap;

use super::Tensor;
use crate::error::{KsttError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of every learnable tensor. Registration order is stable and
/// is the order used by the optimizer and the checkpoint writer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(KsttError::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let (idx, _) = self.params.insert_full(name, tensor.with_grad());
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .unwrap_or("?")
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn total_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of every parameter value, used to check that a
    /// code path leaves the model untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.params {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for x in t.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Overwrites values from `(name, tensor)` records. Every stored parameter
    /// must appear exactly once with a matching shape.
    pub fn load_values(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(KsttError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                records.len()
            )));
        }
        for (name, t) in records {
            let slot = self
                .params
                .get_mut(&name)
                .ok_or_else(|| KsttError::Checkpoint(format!("unknown tensor {name:?}")))?;
            if slot.shape() != t.shape() {
                return Err(KsttError::Checkpoint(format!(
                    "tensor {name:?}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
            slot.zero_grad();
        }
        Ok(())
    }
}
