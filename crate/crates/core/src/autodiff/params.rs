use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters (e.g. input statistics) are saved with the model
    /// but never updated.
    pub trainable: bool,
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

impl<T: Real> Param<T> {
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameters in registration order, with Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter and returns its position.
    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let i = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            value,
            trainable,
            step: 0,
        });
        self.index.insert(name.to_string(), i);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn param(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and values in another precision; Adam state is reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast(), p.trainable).unwrap();
        }
        out
    }

    /// One Adam update with bias correction. Frozen parameters are skipped.
    pub fn adam_step(&mut self, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
        let one = T::one();
        for (p, g) in self.params.iter_mut().zip(grads) {
            if !p.trainable {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let lr = T::lit(lr);
            let (w, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
