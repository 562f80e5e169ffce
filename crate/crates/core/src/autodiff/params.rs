//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mapping from parameter path (e.g. `backbone.block0.conv.weight`) to
/// tensor. Iteration is name-sorted, so every walk over a set is stable
/// across runs and platforms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<F: Scalar> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::invalid("parameter set", format!("duplicate name `{name}`")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str, context: &str) -> Result<&Tensor<F>> {
        self.map.get(name).ok_or_else(|| Error::UnknownParameter {
            name: name.into(),
            context: context.into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Copy every entry of `other` under `prefix.` into `self`.
    pub fn absorb_prefixed(&mut self, prefix: &str, other: &ParameterSet<F>) {
        for (name, tensor) in other.iter() {
            self.map.insert(format!("{prefix}.{name}"), tensor.clone());
        }
    }

    /// Split out the entries under `prefix.`, stripping the prefix.
    pub fn extract_prefixed(&self, prefix: &str) -> ParameterSet<F> {
        let mut out = ParameterSet::new();
        let full = format!("{prefix}.");
        for (name, tensor) in self.iter() {
            if let Some(rest) = name.strip_prefix(&full) {
                out.map.insert(rest.to_string(), tensor.clone());
            }
        }
        out
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_aligned(&self, other: &ParameterSet<F>, context: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                context,
                format!("parameter count {} vs {}", self.len(), other.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::shape(context, format!("name `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape(
                    context,
                    format!("`{na}` shape {:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        let mut out = ParameterSet::new();
        for (name, tensor) in self.iter() {
            out.map.insert(name.to_string(), tensor.cast());
        }
        out
    }
}

impl<F: Scalar> FromIterator<(String, Tensor<F>)> for ParameterSet<F> {
    fn from_iter<T: IntoIterator<Item = (String, Tensor<F>)>>(iter: T) -> Self {
        ParameterSet { map: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_insert_rejected() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn iteration_is_name_sorted() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("b", Tensor::zeros(vec![1])).unwrap();
        p.insert("a", Tensor::zeros(vec![1])).unwrap();
        p.insert("c", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn prefix_roundtrip() {
        let mut inner = ParameterSet::<f32>::new();
        inner.insert("w", Tensor::ones(vec![2])).unwrap();
        let mut flat = ParameterSet::new();
        flat.absorb_prefixed("head", &inner);
        assert!(flat.contains("head.w"));
        let back = flat.extract_prefixed("head");
        assert_eq!(back, inner);
    }
}
