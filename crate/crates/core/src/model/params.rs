use std::collections::HashSet;

use crate::tensor::{Tensor, TensorError};

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub id: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer weights and biases of a model, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layers: Vec<LayerParams>,
}

/// Gradients share the layout of the parameters they differentiate.
pub type Gradient = ParameterSet;

impl ParameterSet {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self, TensorError> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.id.as_str()) {
                return Err(TensorError::DuplicateId(l.id.clone()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.id.as_str())
    }

    /// Total parameter count, weights and biases.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn nonzero_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.cardinality()).sum()
    }

    /// Fraction of weights that are non-zero; biases are not counted.
    pub fn weight_density(&self) -> f64 {
        self.nonzero_weights() as f64 / self.num_weights() as f64
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    id: l.id.clone(),
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// Same ids and shapes, layer by layer.
    pub fn check_congruent(&self, other: &ParameterSet) -> Result<(), TensorError> {
        if self.layers.len() != other.layers.len() {
            return Err(TensorError::ShapeMismatch {
                left: vec![self.layers.len()],
                right: vec![other.layers.len()],
            });
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            a.weight.same_shape(&b.weight)?;
            a.bias.same_shape(&b.bias)?;
            if a.id != b.id {
                return Err(TensorError::ShapeMismatch {
                    left: a.weight.shape().to_vec(),
                    right: b.weight.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// All values in network order, each layer's weight followed by its bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut()))
    }

    /// `self += scale * other`. Shapes must already be congruent.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) {
        for (v, o) in self.values_mut().zip(other.values()) {
            *v += scale * o;
        }
    }

    /// Round every value through `f32`, the precision used on the wire.
    pub fn to_wire_precision(&self) -> Self {
        let mut out = self.clone();
        for v in out.values_mut() {
            *v = *v as f32 as f64;
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParameterSet {
        ParameterSet::new(vec![LayerParams {
            id: "fc1".into(),
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, -2.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.5, 0.0]).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn counts_ignore_bias_for_density() {
        let p = toy();
        assert_eq!(p.num_params(), 6);
        assert_eq!(p.nonzero_weights(), 2);
        assert_eq!(p.weight_density(), 0.5);
    }

    #[test]
    fn congruence_detects_shape_drift() {
        let p = toy();
        let mut q = toy();
        q.layers_mut()[0].bias = Tensor::zeros(&[3]);
        assert!(p.check_congruent(&q).is_err());
        assert!(p.check_congruent(&p.zeros_like()).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let l = toy().layers()[0].clone();
        assert!(ParameterSet::new(vec![l.clone(), l]).is_err());
    }
}
