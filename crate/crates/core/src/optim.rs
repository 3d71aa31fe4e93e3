use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction and explicit, serializable moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.to_string(), var.zeros_like()?);
            second.insert(name.to_string(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params`; parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let g = match grads.get(var) {
                Some(g) => g.detach(),
                None => var.zeros_like()?,
            };
            let m = self.first.get_mut(name).expect("moment exists for every parameter");
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = self.second.get_mut(name).expect("moment exists for every parameter");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<param>` and `v/<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("m", &mut self.first), ("v", &mut self.second)] {
            for (k, t) in map.iter_mut() {
                let src = tensors.get(&format!("{prefix}/{k}")).ok_or_else(|| {
                    crate::error::Error::InvalidValue(format!("missing optimizer moment {prefix}/{k}"))
                })?;
                *t = src.to_dtype(t.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
