use crate::error::{invalid, Result};

use super::{Grads, Layer, Param, Pass, Real, Saved, Tensor4};

/// A chain of layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor4<T>, pass: &mut Pass) -> Result<(Tensor4<T>, Vec<Saved<T>>)> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, s) = layer.forward(&cur, pass)?;
            saved.push(s);
            cur = next;
        }
        Ok((cur, saved))
    }

    pub fn backward(&self, saved: &[Saved<T>], grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        if saved.len() != self.layers.len() {
            return Err(invalid("saved context length does not match layer count"));
        }
        let mut per_layer: Vec<Grads<T>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, s) in self.layers.iter().zip(saved).rev() {
            let (dx, pg) = layer.backward(s, &g)?;
            per_layer.push(pg);
            g = dx;
        }
        Ok((g, per_layer.into_iter().rev().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().into_iter().map(move |n| format!("{i}.{n}")))
            .collect()
    }
}
