use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every entry of `other` into `self`, replacing existing names.
    pub fn extend(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter on `tape`; names for which `trainable` is false
    /// become constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Gradients for every bound parameter that received one.
    pub fn grads(&self, grads: &Gradients) -> GradSet {
        let mut out = GradSet::default();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                out.tensors.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Gradients keyed by parameter name. Absent names mean zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    tensors: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        GradSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(acc) => acc.add_assign(v)?,
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.scale_in_place(s);
        }
    }

    /// Entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> GradSet {
        GradSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Largest absolute entry across all gradients.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let f1 = p.fingerprint();
        assert_eq!(f1, p.clone().fingerprint());
        p.get_mut("a").unwrap().data_mut()[0] = 1.0 + 1e-15;
        assert_ne!(f1, p.fingerprint());
    }

    #[test]
    fn bind_respects_trainable_filter() {
        let mut p = ParamSet::new();
        p.insert("frozen", Tensor::vector(vec![1.0]));
        p.insert("live", Tensor::vector(vec![2.0]));
        let tape = Tape::new();
        let b = p.bind(&tape, |n| n == "live");
        let loss = b.get("frozen").unwrap().mul(&b.get("live").unwrap()).unwrap().sum().unwrap();
        let g = b.grads(&tape.backward(loss).unwrap());
        assert!(g.get("frozen").is_none());
        assert_eq!(g.get("live").unwrap().data(), &[1.0]);
    }
}
