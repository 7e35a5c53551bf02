//! Named parameter storage shared by the optimizer and checkpoint code.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::{shape_str, Matrix};

/// Anything that owns named matrices, visited in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters and gradients keyed by name. Iteration order is the sorted
/// name order, which is also the on-disk order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    grads: BTreeMap<String, Matrix>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of every parameter of `model`, with zeroed gradients.
    pub fn from_parameters(model: &impl Parameters) -> Self {
        let mut store = Self::new();
        model.visit("", &mut |name, m| store.insert(name, m.clone()));
        store
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.grads.insert(name.to_string(), Matrix::zeros(value.rows(), value.cols()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `(name, param, grad)` triples in name order, with mutable params.
    pub fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Matrix, &Matrix)> {
        self.params.iter_mut().zip(self.grads.values()).map(|((k, p), g)| (k.as_str(), p, g))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Matrix) -> Result<()> {
        let slot =
            self.grads.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        if slot.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` is {}, parameter is {}",
                shape_str(grad),
                shape_str(slot)
            )));
        }
        slot.add_assign(grad)
    }

    /// Adds every matrix of a gradient-shaped model into the gradient slots.
    pub fn accumulate_from(&mut self, grads: &impl Parameters) -> Result<()> {
        let mut result = Ok(());
        grads.visit("", &mut |name, g| {
            if result.is_ok() {
                result = self.accumulate_grad(name, g);
            }
        });
        result
    }

    /// Copies stored parameter values back into `model`.
    pub fn write_into(&self, model: &mut impl Parameters) -> Result<()> {
        let mut result = Ok(());
        model.visit_mut("", &mut |name, m| {
            if result.is_err() {
                return;
            }
            match self.params.get(name) {
                Some(v) if v.shape() == m.shape() => m.clone_from(v),
                Some(v) => {
                    result = Err(Error::Shape(format!(
                        "stored `{name}` is {}, model expects {}",
                        shape_str(v),
                        shape_str(m)
                    )))
                }
                None => result = Err(Error::InvalidArgument(format!("missing parameter `{name}`"))),
            }
        });
        result
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales gradients so their global norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_grad_norm();
        if norm > max_norm && norm > 0.0 {
            // Scaling by max/norm can land a hair above max in floating point.
            let scale = max_norm / norm * (1.0 - 1e-12);
            for g in self.grads.values_mut() {
                g.scale_in_place(scale);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroing_and_accumulating() {
        let mut s = ParamStore::new();
        s.insert("b", Matrix::filled(1, 2, 1.0));
        s.insert("a", Matrix::filled(2, 2, 1.0));
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
        s.accumulate_grad("a", &Matrix::filled(2, 2, 0.5)).unwrap();
        s.accumulate_grad("a", &Matrix::filled(2, 2, 0.25)).unwrap();
        assert_eq!(s.grad("a").unwrap().as_slice(), &[0.75; 4]);
        assert!(s.accumulate_grad("a", &Matrix::zeros(1, 2)).is_err());
        assert!(s.accumulate_grad("zz", &Matrix::zeros(1, 2)).is_err());
        s.zero_grads();
        assert!(s.grad("a").unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::zeros(3, 3));
        s.accumulate_grad("w", &Matrix::filled(3, 3, 10.0)).unwrap();
        let before = s.clip_grad_norm(1.0);
        assert!((before - 30.0).abs() < 1e-12);
        assert!(s.global_grad_norm() <= 1.0);
    }
}
