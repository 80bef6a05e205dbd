use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::FlowEstimator;
use crate::error::{Error, Result};
use crate::models::luma;
use crate::tensor::{FlowField, VideoTensor};

/// Iterative Horn–Schunck solver unrolled as tensor ops, so the estimate is
/// differentiable with respect to pixels.
///
/// Image gradients are central differences of the pair average with replicated
/// borders; each Jacobi sweep applies
/// `u ← ū − Ix (Ix ū + Iy v̄ + It) / (λ + Ix² + Iy²)` and likewise for `v`.
/// Intensities are rescaled by `intensity_scale` first, so `λ` is expressed in
/// 8-bit grey levels by default.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HornSchunck {
    pub iterations: usize,
    /// Smoothness weight `λ` in the update denominator.
    pub smoothness: f64,
    pub intensity_scale: f64,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl Clone for HornSchunck {
    fn clone(&self) -> Self {
        Self {
            intensity_scale: self.intensity_scale,
            ..Self::new(self.iterations, self.smoothness)
        }
    }
}

impl PartialEq for HornSchunck {
    fn eq(&self, other: &Self) -> bool {
        self.iterations == other.iterations
            && self.smoothness == other.smoothness
            && self.intensity_scale == other.intensity_scale
    }
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self::new(50, 0.1)
    }
}

fn diff_cols(img: &Tensor) -> Result<Tensor> {
    let w = img.dims()[2];
    let p = img.pad_with_same(2, 1, 1)?;
    Ok(((p.narrow(2, 2, w)? - p.narrow(2, 0, w)?)? * 0.5)?)
}

fn diff_rows(img: &Tensor) -> Result<Tensor> {
    let h = img.dims()[1];
    let p = img.pad_with_same(1, 1, 1)?;
    Ok(((p.narrow(1, 2, h)? - p.narrow(1, 0, h)?)? * 0.5)?)
}

fn neighbour_mean(x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    let pc = x.pad_with_same(2, 1, 1)?;
    let pr = x.pad_with_same(1, 1, 1)?;
    let sum = ((pc.narrow(2, 0, w)? + pc.narrow(2, 2, w)?)? + (pr.narrow(1, 0, h)? + pr.narrow(1, 2, h)?)?)?;
    Ok((sum * 0.25)?)
}

impl HornSchunck {
    pub fn new(iterations: usize, smoothness: f64) -> Self {
        Self {
            iterations,
            smoothness,
            intensity_scale: 255.0,
            calls: AtomicUsize::new(0),
        }
    }

    /// Flow from `first` to `second`, both `[P, H, W]` luma stacks.
    pub fn solve_pairs(&self, first: &Tensor, second: &Tensor) -> Result<(Tensor, Tensor)> {
        let avg = ((first + second)? * 0.5)?;
        let ix = diff_cols(&avg)?;
        let iy = diff_rows(&avg)?;
        let it = (second - first)?;
        let denom = ((ix.sqr()? + iy.sqr()?)? + self.smoothness)?;
        let kx = (&ix / &denom)?;
        let ky = (&iy / &denom)?;
        let mut u = ix.zeros_like()?;
        let mut v = ix.zeros_like()?;
        for _ in 0..self.iterations {
            let ub = neighbour_mean(&u)?;
            let vb = neighbour_mean(&v)?;
            let resid = (((&ix * &ub)? + (&iy * &vb)?)? + &it)?;
            u = (&ub - (&kx * &resid)?)?;
            v = (&vb - (&ky * &resid)?)?;
        }
        Ok((u, v))
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate(&self, video: &VideoTensor) -> Result<FlowField> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (b, t, c, h, w) = video.tensor().dims5()?;
        if t < 2 {
            return Err(Error::TooFewFrames { need: 2, got: t });
        }
        let gray = if c == 3 {
            luma(video.tensor())?
        } else {
            video.tensor().mean(2)?
        };
        let gray = (gray * self.intensity_scale)?;
        let p = b * (t - 1);
        let first = gray.narrow(1, 0, t - 1)?.reshape((p, h, w))?;
        let second = gray.narrow(1, 1, t - 1)?.reshape((p, h, w))?;
        let (u, v) = self.solve_pairs(&first, &second)?;
        let flow = Tensor::stack(&[u, v], 1)?.reshape((b, t - 1, 2, h, w))?;
        FlowField::new(flow)
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}
