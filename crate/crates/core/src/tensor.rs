//! Shape-checked tensor newtypes and the explicit random source.
//!
//! Every tensor carries a leading batch dimension. Randomness never comes from
//! a global generator: callers thread a [`SeededRng`] through every function that
//! samples, which is what makes runs and checkpoints bit-reproducible.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-space clip batch, `[B, T, C, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoTensor(Tensor);

/// Dense flow stack, `[B, T-1, 2, H, W]` in pixels per frame; channel 0 is horizontal.
#[derive(Debug, Clone)]
pub struct FlowField(Tensor);

/// Discriminator input `[B, T, 3, H, W]` holding `(u, v, |(u, v)|)`.
#[derive(Debug, Clone)]
pub struct MotionTensor(Tensor);

fn require_rank5(what: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 5 {
        return Err(Error::InvalidShape {
            what,
            expected: "rank 5 [B, T, C, H, W]",
            got: t.dims().to_vec(),
        });
    }
    Ok(())
}

macro_rules! batched_newtype {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_inner(self) -> Tensor {
                self.0
            }

            pub fn batch(&self) -> usize {
                self.0.dims()[0]
            }

            pub fn frames(&self) -> usize {
                self.0.dims()[1]
            }

            pub fn channels(&self) -> usize {
                self.0.dims()[2]
            }

            pub fn height(&self) -> usize {
                self.0.dims()[3]
            }

            pub fn width(&self) -> usize {
                self.0.dims()[4]
            }

            /// Same data with gradient tracking cut.
            pub fn detach(&self) -> Self {
                Self(self.0.detach())
            }

            /// Select one batch element, keeping the batch dimension.
            pub fn item(&self, b: usize) -> Result<Self> {
                Ok(Self(self.0.narrow(0, b, 1)?))
            }
        }
    };
}

batched_newtype!(VideoTensor, "video");
batched_newtype!(FlowField, "flow");
batched_newtype!(MotionTensor, "motion");

impl VideoTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        require_rank5("video", &t)?;
        Ok(Self(t))
    }

    /// Wrap a single `[T, C, H, W]` clip as a batch of one.
    pub fn from_clip(t: Tensor) -> Result<Self> {
        Self::new(t.unsqueeze(0)?)
    }

    /// Concatenate clips along the batch dimension.
    pub fn stack(items: &[VideoTensor]) -> Result<Self> {
        let ts: Vec<&Tensor> = items.iter().map(|v| &v.0).collect();
        Self::new(Tensor::cat(&ts, 0)?)
    }
}

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        require_rank5("flow", &t)?;
        if t.dims()[2] != 2 {
            return Err(Error::InvalidShape {
                what: "flow",
                expected: "2 channels (u, v)",
                got: t.dims().to_vec(),
            });
        }
        Ok(Self(t))
    }

    /// Wrap a single `[T-1, 2, H, W]` stack as a batch of one.
    pub fn from_clip(t: Tensor) -> Result<Self> {
        Self::new(t.unsqueeze(0)?)
    }
}

impl MotionTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        require_rank5("motion", &t)?;
        if t.dims()[2] != 3 {
            return Err(Error::InvalidShape {
                what: "motion",
                expected: "3 channels (u, v, magnitude)",
                got: t.dims().to_vec(),
            });
        }
        Ok(Self(t))
    }

    pub fn stack(items: &[MotionTensor]) -> Result<Self> {
        let ts: Vec<&Tensor> = items.iter().map(|v| &v.0).collect();
        Self::new(Tensor::cat(&ts, 0)?)
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// Fails fast when a tensor holds NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let s = t.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(what))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Serializable snapshot of a [`SeededRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

/// ChaCha8 stream used for every stochastic choice in the crate.
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for a named purpose under a base seed.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Self::new(mix_seed(seed, tag))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: hex::encode(self.0.get_seed()),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let bad = |r: &str| Error::config("rng", r.to_string());
        let bytes = hex::decode(&state.seed).map_err(|e| bad(&e.to_string()))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos.parse::<u128>().map_err(|e| bad(&e.to_string()))?);
        Ok(Self(rng))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Standard-normal tensor of the given shape.
    pub fn normal_tensor(&mut self, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n = dims.iter().product();
        let data = self.normal_vec(n);
        Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
    }

    pub fn normal_like(&mut self, t: &Tensor) -> Result<Tensor> {
        self.normal_tensor(t.dims(), t.dtype(), t.device())
    }
}

/// SplitMix64 finalizer over `seed ^ tag`, used to derive sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_round_trips() {
        let mut rng = SeededRng::new(11);
        for _ in 0..17 {
            rng.normal();
        }
        let st = rng.state();
        let mut restored = SeededRng::from_state(&st).unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn newtypes_check_rank_and_channels() {
        let dev = Device::Cpu;
        let bad = Tensor::zeros((2, 3, 4), DType::F32, &dev).unwrap();
        assert!(VideoTensor::new(bad).is_err());
        let flow3 = Tensor::zeros((1, 2, 3, 4, 4), DType::F32, &dev).unwrap();
        assert!(FlowField::new(flow3).is_err());
        let motion = Tensor::zeros((1, 2, 3, 4, 4), DType::F32, &dev).unwrap();
        assert!(MotionTensor::new(motion).is_ok());
    }

    #[test]
    fn non_finite_is_detected() {
        let t = Tensor::new(&[1.0f32, f32::NAN], &Device::Cpu).unwrap();
        assert!(ensure_finite(&t, "x").is_err());
        let t = Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap();
        assert!(ensure_finite(&t, "x").is_ok());
    }
}
