//! AdamW with decoupled weight decay and serializable moments.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(field, "lr > 0, betas in [0, 1), eps > 0, weight_decay >= 0"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamSet, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let mhat = (&m / bc1)?;
            let vhat = (&v / bc2)?;
            let theta = var.as_detached_tensor();
            let decayed = (&theta * (1.0 - c.lr * c.weight_decay))?;
            let update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments keyed `m.<param>` and `v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn from_state(cfg: AdamWConfig, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut opt = Self::new(cfg);
        opt.steps = steps;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                opt.v.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Incompatible(format!("unexpected optimizer entry {k}")));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut b = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        b.zeros("w", &[3]).unwrap();
        let p = b.finish();
        let w = p.var("w").unwrap().as_tensor().clone();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let loss = (w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&p, &grads).unwrap();
        let got: Vec<f64> = p.var("w").unwrap().as_tensor().to_vec1().unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - 0.1 * f64::signum(t)).abs() < 1e-6);
        }
        assert_eq!(opt.state_tensors().len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamWConfig::with_lr(0.0).validate("optim.lr").is_err());
        assert!(AdamWConfig::default().validate("optim").is_ok());
    }
}
