use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    decay: bool,
}

/// Named parameters in insertion order, each with a gradient accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid_arg(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name,
            value,
            grad,
            decay,
        });
        Ok(ParamId(id))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::invalid_arg(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data().iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Converts every value to another element type (gradients reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.value.cast(), e.decay)
                .expect("names are unique in the source store");
        }
        out
    }

    /// Copies values of every parameter of `other` whose name exists here.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            if let Some(id) = self.id(&e.name) {
                self.set(id, e.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// FNV-1a over names, shapes and raw value bits; used to prove a
    /// store was left untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("b", Tensor::zeros(&[2]), false).unwrap();
        let b = s.add("a", Tensor::zeros(&[3]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]), true).is_err());
        let names: Vec<_> = s.ids().map(|id| s.name(id).to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(s.id("a"), Some(b));
        assert_eq!(s.id("b"), Some(a));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("w", Tensor::zeros(&[2]), true).unwrap();
        let before = s.checksum();
        s.grad_mut(a).data_mut()[0] = 1.0;
        assert_eq!(before, s.checksum());
        s.value_mut(a).data_mut()[0] = 1.0;
        assert_ne!(before, s.checksum());
    }
}
