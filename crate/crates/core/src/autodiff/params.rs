use std::collections::BTreeMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flattening order of a parameter set: lexicographic by name.
pub type Layout = Arc<[LayoutEntry]>;

/// Named parameters. Iteration and flattening follow lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Data(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn layout(&self) -> Layout {
        self.tensors
            .iter()
            .map(|(name, t)| LayoutEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a parameter set from a layout and flat values.
    pub fn from_flat(layout: &[LayoutEntry], values: &[f64]) -> Result<Self> {
        let total: usize = layout.iter().map(LayoutEntry::numel).sum();
        if total != values.len() {
            return Err(Error::shape(
                "from_flat",
                format!("layout holds {total} values, got {}", values.len()),
            ));
        }
        let mut set = ParameterSet::new();
        let mut offset = 0;
        for entry in layout {
            let n = entry.numel();
            set.insert(
                entry.name.clone(),
                Tensor::from_slice(&entry.shape, &values[offset..offset + n])?,
            )?;
            offset += n;
        }
        Ok(set)
    }

    /// Adds `delta` (flattened in layout order) to every parameter.
    pub fn add_flat(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::LayoutMismatch);
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.numel();
            for (p, d) in t.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *p += d;
            }
            offset += n;
        }
        Ok(())
    }
}

/// Parameter gradient flattened according to a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    values: Vec<f64>,
    layout: Layout,
}

impl FlatGradient {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        let total: usize = layout.iter().map(LayoutEntry::numel).sum();
        if total != values.len() {
            return Err(Error::shape(
                "flat_gradient",
                format!("layout holds {total} values, got {}", values.len()),
            ));
        }
        Ok(FlatGradient { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let total = layout.iter().map(LayoutEntry::numel).sum();
        FlatGradient {
            values: vec![0.0; total],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn compatible(&self, other: &FlatGradient) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn dot(&self, other: &FlatGradient) -> Result<f64> {
        if !self.compatible(other) {
            return Err(Error::LayoutMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &FlatGradient) -> Result<()> {
        if !self.compatible(other) {
            return Err(Error::LayoutMismatch);
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    /// Values belonging to the named parameter.
    pub fn span(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for entry in self.layout.iter() {
            let n = entry.numel();
            if entry.name == name {
                return Some(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }
}

/// Dot product of two gradients with identical layouts.
pub fn dot(a: &FlatGradient, b: &FlatGradient) -> Result<f64> {
    a.dot(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(values: Vec<f64>) -> FlatGradient {
        let mut set = ParameterSet::new();
        set.insert("w", Tensor::zeros(&[values.len()])).unwrap();
        FlatGradient::new(set.layout(), values).unwrap()
    }

    #[test]
    fn dot_examples() {
        let a = grad(vec![1.0, 2.0]);
        assert_eq!(dot(&a, &grad(vec![3.0, 4.0])).unwrap(), 11.0);
        assert_eq!(dot(&a, &grad(vec![0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(dot(&a, &a).unwrap(), 5.0);
    }

    #[test]
    fn dot_rejects_layout_mismatch() {
        let a = grad(vec![1.0, 2.0]);
        let mut set = ParameterSet::new();
        set.insert("v", Tensor::zeros(&[2])).unwrap();
        let b = FlatGradient::new(set.layout(), vec![1.0, 1.0]).unwrap();
        assert!(matches!(dot(&a, &b), Err(Error::LayoutMismatch)));
    }

    #[test]
    fn flattening_is_lexicographic_and_stable() {
        let mut set = ParameterSet::new();
        set.insert("b", Tensor::full(&[2], 2.0)).unwrap();
        set.insert("a", Tensor::full(&[1], 1.0)).unwrap();
        assert_eq!(set.flatten(), vec![1.0, 2.0, 2.0]);
        assert_eq!(set.layout(), set.layout());
        let back = ParameterSet::from_flat(&set.layout(), &set.flatten()).unwrap();
        assert_eq!(back, set);
        assert!(set.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
