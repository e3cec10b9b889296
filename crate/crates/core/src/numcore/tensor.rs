use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named dense parameter tensor with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Append rows to a rank-2 tensor, zero-filled.
    pub fn grow_rows(&mut self, extra: usize) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::usage(format!("cannot grow rows of rank-{} tensor {}", self.shape.len(), self.name)));
        }
        self.shape[0] += extra;
        let n = self.shape[0] * self.shape[1];
        self.values.resize(n, 0.0);
        self.grad.resize(n, 0.0);
        Ok(())
    }

    /// Drop all rows of a rank-2 tensor.
    pub fn clear_rows(&mut self) {
        if self.shape.len() == 2 {
            self.shape[0] = 0;
            self.values.clear();
            self.grad.clear();
        }
    }
}

/// Ordered layer names and the tensors each layer owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRegistry {
    names: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl LayerRegistry {
    pub fn new() -> Self {
        LayerRegistry {
            names: Vec::new(),
            members: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, layer: usize) -> &str {
        &self.names[layer]
    }

    pub fn members(&self, layer: usize) -> &[usize] {
        &self.members[layer]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn layer_of(&self, tensor: usize) -> Option<usize> {
        self.members.iter().position(|m| m.contains(&tensor))
    }
}

impl Default for LayerRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tensor gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            // Token tables may have grown between the two snapshots.
            if a.len() < b.len() {
                a.resize(b.len(), 0.0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Concatenate the buffers of each layer, in registry order.
    pub fn per_layer(&self, registry: &LayerRegistry) -> Vec<Vec<f64>> {
        (0..registry.len())
            .map(|l| {
                registry
                    .members(l)
                    .iter()
                    .flat_map(|&t| self.tensors[t].iter().copied())
                    .collect()
            })
            .collect()
    }
}

/// All tensors of a model together with their layer grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    registry: LayerRegistry,
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            registry: LayerRegistry::new(),
            tensors: Vec::new(),
        }
    }

    /// Register a new layer made of `tensors`; returns the tensor indices.
    pub fn push_layer(&mut self, name: impl Into<String>, tensors: Vec<ParamTensor>) -> Result<Vec<usize>> {
        let name = name.into();
        if self.registry.index_of(&name).is_some() {
            return Err(Error::config(format!("duplicate layer name {name}")));
        }
        let start = self.tensors.len();
        let ids: Vec<usize> = (start..start + tensors.len()).collect();
        self.tensors.extend(tensors);
        self.registry.names.push(name);
        self.registry.members.push(ids.clone());
        Ok(ids)
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &ParamTensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ParamTensor {
        &mut self.tensors[i]
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            for (a, b) in t.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Snapshot of the `grad` fields.
    pub fn grads(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| t.grad.clone()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(ParamTensor::is_finite)
    }

    /// Flattened values of one layer.
    pub fn layer_values(&self, layer: usize) -> Vec<f64> {
        self.registry
            .members(layer)
            .iter()
            .flat_map(|&t| self.tensors[t].values.iter().copied())
            .collect()
    }

    /// Bitwise checksum of all values (FNV-1a over the IEEE bit patterns).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.values {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_assigns_every_tensor_once() {
        let mut p = ParamSet::new();
        p.push_layer("a", vec![ParamTensor::zeros("a.w", &[2, 3]), ParamTensor::zeros("a.b", &[2])]).unwrap();
        p.push_layer("b", vec![ParamTensor::zeros("b.w", &[1])]).unwrap();
        assert_eq!(p.registry().names(), ["a", "b"]);
        for t in 0..p.tensors().len() {
            let owners = (0..p.registry().len()).filter(|&l| p.registry().members(l).contains(&t)).count();
            assert_eq!(owners, 1);
        }
        assert!(p.push_layer("a", vec![]).is_err());
    }

    #[test]
    fn grow_rows_keeps_values_and_grad_aligned() {
        let mut t = ParamTensor::from_values("tok", &[1, 2], vec![1.0, 2.0]).unwrap();
        t.grow_rows(2).unwrap();
        assert_eq!(t.shape(), [3, 2]);
        assert_eq!(t.values(), [1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.grad().len(), t.values().len());
        t.clear_rows();
        assert_eq!(t.shape(), [0, 2]);
        assert!(t.is_empty());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(ParamTensor::from_values("x", &[2, 2], vec![0.0; 3]).is_err());
    }
}
