use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of parameters with exact lookup by name.
#[derive(Clone, Debug, Default)]
pub struct NetworkParams<T = f32> {
    entries: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamTensor { name, value, grad });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, i: usize) -> &ParamTensor<T> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamTensor<T> {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Adds another collection's gradients into this one (same layout required).
    pub fn accumulate_grads(&mut self, other: &NetworkParams<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Config("parameter sets differ in length".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Config(format!(
                    "parameter order differs: `{}` vs `{}`",
                    a.name, b.name
                )));
            }
            a.grad.accumulate(&b.grad)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Converts to another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let mut out = NetworkParams::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.value.cast())
                .expect("names already unique");
        }
        out
    }

    /// Draws a convolution kernel `[out, in, k, k]` with fan-in scaled
    /// normal weights (std = gain * sqrt(2 / fan_in)) and a zero bias.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        gain: f64,
    ) -> Result<()> {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let w: Vec<T> = (0..out_ch * in_ch * k * k)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        self.insert(format!("{prefix}.w"), Tensor::from_vec(&[out_ch, in_ch, k, k], w)?)?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = NetworkParams::<f32>::new();
        p.insert("b", Tensor::zeros(&[2])).unwrap();
        p.insert("a", Tensor::zeros(&[3])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(p.get("a").unwrap().grad.shape(), &[3]);
        assert!(p.get("c").is_none());
        assert_eq!(p.numel(), 5);
    }
}
