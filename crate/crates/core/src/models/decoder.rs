//! Frozen chunk-recurrent decoder and its exact sequential inverse.
//!
//! Each latent chunk `[c, h, w]` holds `c` low-resolution luma frames. A hidden
//! state is carried from chunk to chunk:
//!
//! ```text
//! y_k = z_k + P h_{k-1}
//! h_k = tanh(A z_k + R h_{k-1})
//! frames_k = clamp(0.5 + upsample(y_k) / latent_scale, 0, 1)
//! ```
//!
//! `A`, `R`, `P` are fixed per-pixel channel mixes drawn from a seed. The
//! encoder area-downsamples frames to `y_k` and peels the recurrence off one
//! chunk at a time.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Latent channels; also the number of frames each chunk decodes to.
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Integer spatial upsampling factor from latent to pixels.
    pub scale: usize,
    /// Latent units per unit of pixel intensity.
    pub latent_scale: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden_channels: 4,
            latent_height: 8,
            latent_width: 8,
            scale: 4,
            latent_scale: 4.0,
            seed: 7,
        }
    }
}

impl DecoderConfig {
    pub fn frames_per_chunk(&self) -> usize {
        self.latent_channels
    }

    pub fn pixel_size(&self) -> (usize, usize) {
        (self.latent_height * self.scale, self.latent_width * self.scale)
    }
}

/// Counts of decode steps by gradient mode, the memory proxy for a window decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub tracked_steps: usize,
    pub untracked_steps: usize,
}

#[derive(Debug, Clone)]
pub struct ChunkRecurrentDecoder {
    cfg: DecoderConfig,
    input_mix: Tensor,
    recur_mix: Tensor,
    carry_mix: Tensor,
    up_rows: Tensor,
    up_cols_t: Tensor,
    down_rows: Tensor,
    down_cols_t: Tensor,
}

fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let ratio = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        m[i * inp + i1] += frac;
    }
    m
}

fn area_matrix(out: usize, factor: usize) -> Vec<f64> {
    let inp = out * factor;
    let mut m = vec![0.0; out * inp];
    for j in 0..out {
        for i in j * factor..(j + 1) * factor {
            m[j * inp + i] = 1.0 / factor as f64;
        }
    }
    m
}

/// Luma `[.., 3, H, W]` → `[.., H, W]` with Rec. 601 weights.
pub fn luma(video: &Tensor) -> Result<Tensor> {
    let c = video.rank() - 3;
    let r = video.narrow(c, 0, 1)?.squeeze(c)?;
    let g = video.narrow(c, 1, 1)?.squeeze(c)?;
    let b = video.narrow(c, 2, 1)?.squeeze(c)?;
    Ok((((r * 0.299)? + (g * 0.587)?)? + (b * 0.114)?)?)
}

impl ChunkRecurrentDecoder {
    pub fn new(cfg: DecoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.scale == 0 || cfg.latent_channels == 0 || cfg.hidden_channels == 0 {
            return Err(Error::config("decoder", "sizes must be positive"));
        }
        let mut rng = SeededRng::new(cfg.seed);
        let (c, hc) = (cfg.latent_channels, cfg.hidden_channels);
        let mut mat = |rows: usize, cols: usize, gain: f64| -> Result<Tensor> {
            let std = gain / (cols as f64).sqrt();
            Ok((rng.normal_tensor(&[rows, cols], DType::F64, device)? * std)?.to_dtype(dtype)?)
        };
        let input_mix = mat(hc, c, 0.8)?;
        let recur_mix = mat(hc, hc, 0.5)?;
        let carry_mix = mat(c, hc, 0.3)?;
        let (h, w) = (cfg.latent_height, cfg.latent_width);
        let (ph, pw) = cfg.pixel_size();
        let t = |v: Vec<f64>, r: usize, cc: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (r, cc), device)?.to_dtype(dtype)?)
        };
        let up_rows = t(bilinear_matrix(ph, h), ph, h)?;
        let up_cols_t = t(bilinear_matrix(pw, w), pw, w)?.t()?.contiguous()?;
        let down_rows = t(area_matrix(h, cfg.scale), h, ph)?;
        let down_cols_t = t(area_matrix(w, cfg.scale), w, pw)?.t()?.contiguous()?;
        Ok(Self {
            cfg,
            input_mix,
            recur_mix,
            carry_mix,
            up_rows,
            up_cols_t,
            down_rows,
            down_cols_t,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn mix(m: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (b, i, h, w) = x.dims4()?;
        let y = m.broadcast_matmul(&x.reshape((b, i, h * w))?)?;
        Ok(y.reshape((b, m.dims()[0], h, w))?)
    }

    fn zero_state(&self, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::zeros(
            (batch, self.cfg.hidden_channels, self.cfg.latent_height, self.cfg.latent_width),
            dtype,
            device,
        )?)
    }

    /// One recurrent step: returns the chunk's low-res frames and the next state.
    fn step(&self, z: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = (z + Self::mix(&self.carry_mix, h)?)?;
        let pre = (Self::mix(&self.input_mix, z)? + Self::mix(&self.recur_mix, h)?)?;
        Ok((y, pre.tanh()?))
    }

    /// Low-res latent frames `[B, c, h, w]` → RGB pixels `[B, c, 3, H, W]`.
    fn render(&self, y: &Tensor) -> Result<Tensor> {
        let up = self.up_rows.broadcast_matmul(y)?.broadcast_matmul(&self.up_cols_t)?;
        let px = ((up / self.cfg.latent_scale)? + 0.5)?.clamp(0.0, 1.0)?;
        let (b, f, hh, ww) = px.dims4()?;
        Ok(px.unsqueeze(2)?.broadcast_as((b, f, 3, hh, ww))?.contiguous()?)
    }

    fn check_latents(&self, latents: &Tensor) -> Result<usize> {
        let dims = latents.dims();
        let ok = dims.len() == 5
            && dims[2] == self.cfg.latent_channels
            && dims[3] == self.cfg.latent_height
            && dims[4] == self.cfg.latent_width;
        if !ok {
            return Err(Error::InvalidShape {
                what: "decoder latents",
                expected: "[B, K, c, h, w] matching the decoder config",
                got: dims.to_vec(),
            });
        }
        Ok(dims[1])
    }

    /// Decode chunks `[start, start + len)` with gradients, rolling the state
    /// through earlier chunks without tracking and stopping after the window.
    pub fn decode_window(
        &self,
        latents: &Tensor,
        start: usize,
        len: usize,
    ) -> Result<(VideoTensor, DecodeStats)> {
        let k = self.check_latents(latents)?;
        if len == 0 || start + len > k {
            return Err(Error::WindowOutOfRange {
                start,
                len,
                chunks: k,
            });
        }
        let b = latents.dims()[0];
        let mut stats = DecodeStats::default();
        let mut h = self.zero_state(b, latents.dtype(), latents.device())?;
        for i in 0..start {
            let z = latents.narrow(1, i, 1)?.squeeze(1)?.detach();
            h = self.step(&z, &h)?.1.detach();
            stats.untracked_steps += 1;
        }
        let h_entry = h.detach();
        let mut h = h_entry;
        let mut frames = Vec::with_capacity(len);
        for i in start..start + len {
            let z = latents.narrow(1, i, 1)?.squeeze(1)?;
            let (y, next) = self.step(&z, &h)?;
            frames.push(self.render(&y)?);
            h = next;
            stats.tracked_steps += 1;
        }
        Ok((VideoTensor::new(Tensor::cat(&frames, 1)?)?, stats))
    }

    /// Decode every chunk with gradients.
    pub fn decode(&self, latents: &Tensor) -> Result<VideoTensor> {
        let k = self.check_latents(latents)?;
        Ok(self.decode_window(latents, 0, k)?.0)
    }

    /// Recover latents from frames `[B, T, 3, H, W]`; `T` must be a multiple of the chunk length.
    pub fn encode(&self, video: &VideoTensor) -> Result<Tensor> {
        let (b, t, _, hh, ww) = video.tensor().dims5()?;
        let f = self.cfg.frames_per_chunk();
        if t % f != 0 || (hh, ww) != self.cfg.pixel_size() {
            return Err(Error::InvalidShape {
                what: "encoder input",
                expected: "frames divisible by chunk length at the decoder's pixel size",
                got: video.tensor().dims().to_vec(),
            });
        }
        let l = luma(&video.tensor().detach().to_dtype(self.up_rows.dtype())?)?;
        let small = self
            .down_rows
            .broadcast_matmul(&l)?
            .broadcast_matmul(&self.down_cols_t)?;
        let y = ((small - 0.5)? * self.cfg.latent_scale)?;
        let k = t / f;
        let y = y.reshape((b, k, f, self.cfg.latent_height, self.cfg.latent_width))?;
        let mut h = self.zero_state(b, y.dtype(), y.device())?;
        let mut chunks = Vec::with_capacity(k);
        for i in 0..k {
            let yk = y.narrow(1, i, 1)?.squeeze(1)?;
            let z = (yk - Self::mix(&self.carry_mix, &h)?)?;
            h = self.step(&z, &h)?.1;
            chunks.push(z.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&chunks, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec() -> ChunkRecurrentDecoder {
        ChunkRecurrentDecoder::new(DecoderConfig::default(), DType::F64, &Device::Cpu).unwrap()
    }

    fn latents(k: usize, seed: u64) -> Tensor {
        (SeededRng::new(seed)
            .normal_tensor(&[2, k, 4, 8, 8], DType::F64, &Device::Cpu)
            .unwrap()
            * 0.5)
            .unwrap()
    }

    #[test]
    fn full_window_matches_full_decode() {
        let d = dec();
        let z = latents(5, 1);
        let (win, stats) = d.decode_window(&z, 0, 5).unwrap();
        let full = d.decode(&z).unwrap();
        let a = win.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = full.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(win.frames(), 20);
        assert_eq!(stats.tracked_steps, 5);
    }

    #[test]
    fn window_bounds_are_checked() {
        let d = dec();
        let z = latents(4, 2);
        assert!(matches!(
            d.decode_window(&z, 2, 3),
            Err(Error::WindowOutOfRange { .. })
        ));
        assert!(d.decode_window(&z, 0, 0).is_err());
    }

    #[test]
    fn decoding_is_causal() {
        let d = dec();
        let z = latents(4, 3);
        let mut z2v = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let chunk = 4 * 8 * 8;
        // Perturb chunk 3 of batch item 0.
        for v in &mut z2v[3 * chunk..4 * chunk] {
            *v += 1.0;
        }
        let z2 = Tensor::from_vec(z2v, z.dims(), &Device::Cpu).unwrap();
        let a = d.decode(&z).unwrap();
        let b = d.decode(&z2).unwrap();
        let early = (a.tensor().narrow(1, 0, 12).unwrap() - b.tensor().narrow(1, 0, 12).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(early, 0.0);
    }

    #[test]
    fn encoder_inverts_decoder_on_unclamped_content() {
        let d = dec();
        // Constant latents stay inside the clamp range and survive down/up sampling.
        let mut vals = Vec::new();
        for k in 0..3 {
            for c in 0..4 {
                vals.extend(std::iter::repeat_n(0.2 * (k as f64) - 0.1 * c as f64, 64));
            }
        }
        let z = Tensor::from_vec(vals, (1, 3, 4, 8, 8), &Device::Cpu).unwrap();
        let video = d.decode(&z).unwrap();
        let back = d.encode(&video).unwrap();
        let err = (back - &z)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
