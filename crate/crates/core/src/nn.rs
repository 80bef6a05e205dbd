//! Parameter containers and the handful of layers the toy networks are built from.
//!
//! Networks do not own tensors directly. They read them by name from a
//! [`ParamSet`] through a [`Weights`] view that either tracks gradients or hands
//! out detached copies sharing the same storage. A detached view is how a
//! network is used as a frozen function inside another network's loss.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Named, ordered collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamSet {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tracked(&self) -> Weights<'_> {
        Weights::new(self, false)
    }

    pub fn frozen(&self) -> Weights<'_> {
        Weights::new(self, true)
    }

    /// Copy with fresh storage; later updates to either side do not leak.
    pub fn deep_copy(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new(self.dtype, &self.device);
        for (k, v) in &self.vars {
            out.insert(k.clone(), &v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Overwrite values in place from tensors with matching names and shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let src = values
                .get(k)
                .ok_or_else(|| Error::MissingParam(k.clone()))?;
            if src.dims() != v.dims() {
                return Err(Error::ShapeMismatch {
                    left: v.dims().to_vec(),
                    right: src.dims().to_vec(),
                });
            }
            v.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Name-addressed read access to a [`ParamSet`].
#[derive(Clone)]
pub struct Weights<'a> {
    set: &'a ParamSet,
    frozen: bool,
    prefix: String,
}

impl<'a> Weights<'a> {
    fn new(set: &'a ParamSet, frozen: bool) -> Self {
        Self {
            set,
            frozen,
            prefix: String::new(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn sub(&self, name: &str) -> Weights<'a> {
        Weights {
            set: self.set,
            frozen: self.frozen,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let full = format!("{}{}", self.prefix, name);
        let var = self.set.var(&full)?;
        Ok(if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// Seeded initializer that fills a [`ParamSet`].
pub struct ParamBuilder {
    set: ParamSet,
    rng: SeededRng,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            set: ParamSet::new(dtype, device),
            rng: SeededRng::new(seed),
            prefix: Vec::new(),
        }
    }

    fn full(&self, name: &str) -> String {
        let mut s = String::new();
        for p in &self.prefix {
            s.push_str(p);
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<()> {
        let t = (self.rng.normal_tensor(dims, DType::F64, &Device::Cpu)? * std)?;
        let full = self.full(name);
        self.set.insert(full, &t)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        let t = Tensor::zeros(dims, DType::F64, &Device::Cpu)?;
        let full = self.full(name);
        self.set.insert(full, &t)
    }

    /// Weight `[inp, out]` with variance `1/inp` and a zero bias; all zeros when `zero`.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize, zero: bool) -> Result<()> {
        self.push(name);
        if zero {
            self.zeros("weight", &[inp, out])?;
        } else {
            self.normal("weight", &[inp, out], 1.0 / (inp as f64).sqrt())?;
        }
        self.zeros("bias", &[out])?;
        self.pop();
        Ok(())
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// `x @ W + b` with `W` stored as `[in, out]`.
pub fn linear(x: &Tensor, w: &Weights, name: &str) -> Result<Tensor> {
    let w = w.sub(name);
    let weight = w.get("weight")?;
    // Fold leading dims into rows so the weight is never broadcast over the batch.
    let dims = x.dims();
    let (lead, inp) = dims.split_at(dims.len() - 1);
    let rows = x.reshape((lead.iter().product::<usize>(), inp[0]))?;
    let y = rows.matmul(&weight)?.broadcast_add(&w.get("bias")?)?;
    let mut out = lead.to_vec();
    out.push(weight.dims()[1]);
    Ok(y.reshape(out)?)
}

/// Affine-free layer norm over the last dimension.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let inv = e.sum_keepdim(D::Minus1)?.recip()?;
    Ok(e.broadcast_mul(&inv)?)
}

/// `x * (1 + scale) + shift` with per-sample `[B, D]` modulation over `[B, N, D]` tokens.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let scale = (scale.unsqueeze(1)? + 1.0)?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

/// Multi-head scaled dot-product attention over `[B, N, D]` inputs.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = q.dims3()?;
    let m = k.dims()[1];
    let dh = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let att = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let att = softmax_last(&att)?;
    let out = att.matmul(&v)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?)
}

/// Sinusoidal embedding of a scalar timestep in `[0, 1]`, repeated over the batch.
pub fn timestep_embedding(
    t: f64,
    batch: usize,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut row = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        row.push((scaled * freq).cos());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        row.push((scaled * freq).sin());
    }
    row.resize(dim, 0.0);
    let t = Tensor::from_vec(row, (1, dim), device)?.to_dtype(dtype)?;
    Ok(t.repeat((batch, 1))?)
}

/// Fixed 1-D sinusoidal table `[len, dim]`.
pub fn sincos_table(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = 1.0 / 10_000f64.powf(j as f64 / half.max(1) as f64);
            let a = p as f64 * freq;
            data.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

/// Global L2 norm of the gradients of every variable in `params` present in `grads`.
pub fn grad_norm(params: &ParamSet, grads: &candle_core::backprop::GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in params.iter() {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += crate::tensor::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_view_shares_storage_but_blocks_gradients() {
        let mut b = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        b.linear("fc", 3, 2, false).unwrap();
        let set = b.finish();
        let x = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        let tracked = linear(&x, &set.tracked(), "fc").unwrap().sum_all().unwrap();
        let grads = tracked.backward().unwrap();
        assert!(grads.get(set.var("fc.weight").unwrap().as_tensor()).is_some());
        let frozen = linear(&x, &set.frozen(), "fc").unwrap().sum_all().unwrap();
        assert!(frozen.backward().is_ok_and(|g| g
            .get(set.var("fc.weight").unwrap().as_tensor())
            .is_none()));
        assert_eq!(
            crate::tensor::scalar(&tracked).unwrap(),
            crate::tensor::scalar(&frozen).unwrap()
        );
    }

    #[test]
    fn deep_copy_is_independent() {
        let mut b = ParamBuilder::new(1, DType::F32, &Device::Cpu);
        b.normal("w", &[4], 1.0).unwrap();
        let a = b.finish();
        let c = a.deep_copy().unwrap();
        assert_eq!(a.content_hash().unwrap(), c.content_hash().unwrap());
        c.var("w")
            .unwrap()
            .set(&Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
