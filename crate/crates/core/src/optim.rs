//! Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and an update count per parameter, so
/// parameters that join training late get their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: Vec<u64>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            steps: vec![0; store.len()],
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<ParamId, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        if self.m.len() != store.len() || self.steps.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        for (&id, g) in grads {
            self.steps[id.0] += 1;
            let t = self.steps[id.0].min(i32::MAX as u64) as i32;
            let step = T::lit(lr / (1.0 - c.beta1.powi(t)));
            let inv_bc2 = T::lit(1.0 / (1.0 - c.beta2.powi(t)));
            let p = store.get_mut(id);
            p.expect_same_shape(g)?;
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("w".into(), Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
        adam.update(&mut store, &grads, 0.1).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }
}
