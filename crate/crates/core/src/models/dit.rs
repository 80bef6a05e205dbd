//! Small diffusion transformer shared by the generator, teacher, fake score and
//! the motion discriminator backbone.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm::VelocityField;
use crate::nn::{
    layer_norm, linear, modulate, multi_head_attention, sincos_table, timestep_embedding,
    ParamBuilder, ParamSet, Weights,
};
use crate::tensor::ensure_finite;

const LN_EPS: f64 = 1e-6;

/// Space-time patch size `(frames, rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Patch {
    pub fn spatial(p: usize) -> Self {
        Self {
            frames: 1,
            rows: p,
            cols: p,
        }
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.frames * self.rows * self.cols
    }

    fn grid(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if t % self.frames != 0 || h % self.rows != 0 || w % self.cols != 0 {
            return Err(Error::InvalidShape {
                what: "patchify input",
                expected: "dimensions divisible by the patch size",
                got: vec![t, h, w],
            });
        }
        Ok((t / self.frames, h / self.rows, w / self.cols))
    }
}

/// `[B, T, C, H, W]` → `[B, N, C·pt·ph·pw]` with tokens ordered (time, row, col).
pub fn patchify(x: &Tensor, patch: Patch) -> Result<Tensor> {
    let (b, t, c, h, w) = x.dims5()?;
    let (gt, gh, gw) = patch.grid(t, h, w)?;
    let x = x.reshape(vec![b, gt, patch.frames, c, gh, patch.rows, gw, patch.cols])?;
    let x = x.permute(vec![0, 1, 4, 6, 3, 2, 5, 7])?.contiguous()?;
    Ok(x.reshape((b, gt * gh * gw, patch.token_dim(c)))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: Patch, dims: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (t, c, h, w) = dims;
    let b = tokens.dims()[0];
    let (gt, gh, gw) = patch.grid(t, h, w)?;
    let x = tokens.reshape(vec![b, gt, gh, gw, c, patch.frames, patch.rows, patch.cols])?;
    let x = x.permute(vec![0, 1, 5, 4, 2, 6, 3, 7])?.contiguous()?;
    Ok(x.reshape((b, t, c, h, w))?)
}

/// Fixed positional code `[N, D]`: half the width encodes time, a quarter each row and column.
pub fn space_time_positions(
    grid: (usize, usize, usize),
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (gt, gh, gw) = grid;
    let dt = dim / 2;
    let dy = dim / 4;
    let dx = dim - dt - dy;
    let time = sincos_table(gt, dt, dtype, device)?
        .reshape((gt, 1, 1, dt))?
        .broadcast_as((gt, gh, gw, dt))?;
    let rows = sincos_table(gh, dy, dtype, device)?
        .reshape((1, gh, 1, dy))?
        .broadcast_as((gt, gh, gw, dy))?;
    let cols = sincos_table(gw, dx, dtype, device)?
        .reshape((1, 1, gw, dx))?
        .broadcast_as((gt, gh, gw, dx))?;
    Ok(Tensor::cat(&[time, rows, cols], 3)?.reshape((gt * gh * gw, dim))?)
}

/// Register the parameters of one adaLN-zero transformer block.
pub(crate) fn init_block(b: &mut ParamBuilder, width: usize, mlp_ratio: usize, zero: bool) -> Result<()> {
    b.linear("ada", width, 6 * width, zero)?;
    b.linear("qkv", width, 3 * width, false)?;
    b.linear("proj", width, width, false)?;
    b.linear("fc1", width, mlp_ratio * width, false)?;
    b.linear("fc2", mlp_ratio * width, width, false)?;
    Ok(())
}

/// One adaLN-zero block over tokens `[B, N, D]` modulated by `cond` `[B, D]`.
pub(crate) fn block_forward(x: &Tensor, cond: &Tensor, w: &Weights, heads: usize) -> Result<Tensor> {
    let m = linear(&cond.silu()?, w, "ada")?.chunk(6, D::Minus1)?;
    let (shift_a, scale_a, gate_a) = (&m[0], &m[1], &m[2]);
    let (shift_m, scale_m, gate_m) = (&m[3], &m[4], &m[5]);

    let h = modulate(&layer_norm(x, LN_EPS)?, shift_a, scale_a)?;
    let qkv = linear(&h, w, "qkv")?.chunk(3, D::Minus1)?;
    let att = multi_head_attention(&qkv[0], &qkv[1], &qkv[2], heads)?;
    let att = linear(&att, w, "proj")?;
    let x = (x + att.broadcast_mul(&gate_a.unsqueeze(1)?)?)?;

    let h = modulate(&layer_norm(&x, LN_EPS)?, shift_m, scale_m)?;
    let h = linear(&linear(&h, w, "fc1")?.gelu_erf()?, w, "fc2")?;
    Ok((x + h.broadcast_mul(&gate_m.unsqueeze(1)?)?)?)
}

/// Velocity-predicting DiT over latent chunk sequences `[B, K, c, h, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Zero the adaLN modulations and the output projection at construction.
    pub zero_init: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            patch: 2,
            width: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
            zero_init: true,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::config("model.width", "must be divisible by heads"));
        }
        if self.width % 4 != 0 {
            return Err(Error::config("model.width", "must be divisible by 4"));
        }
        if self.latent_height % self.patch != 0 || self.latent_width % self.patch != 0 {
            return Err(Error::config("model.patch", "must divide the latent size"));
        }
        if self.depth == 0 || self.num_classes == 0 {
            return Err(Error::config("model.depth", "depth and classes must be positive"));
        }
        Ok(())
    }
}

/// Diffusion transformer predicting the flow-matching velocity.
#[derive(Debug, Clone)]
pub struct DitVelocityNet {
    cfg: DitConfig,
    params: ParamSet,
}

impl DitVelocityNet {
    pub fn init(cfg: DitConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut b = ParamBuilder::new(seed, dtype, device);
        let token = Patch::spatial(cfg.patch).token_dim(cfg.latent_channels);
        b.linear("patch_embed", token, d, false)?;
        b.normal("class_embed", &[cfg.num_classes, d], 0.02)?;
        b.linear("t_embed.fc1", d, d, false)?;
        b.linear("t_embed.fc2", d, d, false)?;
        for i in 0..cfg.depth {
            b.push(format!("blocks.{i}"));
            init_block(&mut b, d, cfg.mlp_ratio, cfg.zero_init)?;
            b.pop();
        }
        b.linear("final_ada", d, 2 * d, cfg.zero_init)?;
        b.linear("final", d, token, cfg.zero_init)?;
        Ok(Self {
            cfg,
            params: b.finish(),
        })
    }

    /// Rebuild around an existing parameter set (e.g. loaded from a checkpoint).
    pub fn from_params(cfg: DitConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let reference = Self::init(cfg.clone(), 0, params.dtype(), params.device())?;
        for (name, var) in reference.params.iter() {
            let have = params.var(name)?;
            if have.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    left: var.dims().to_vec(),
                    right: have.dims().to_vec(),
                });
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// An independent copy with its own storage.
    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.deep_copy()?,
        })
    }

    pub fn forward(&self, z: &Tensor, t: f64, cond: &Tensor, frozen: bool) -> Result<Tensor> {
        let w = if frozen {
            self.params.frozen()
        } else {
            self.params.tracked()
        };
        self.forward_with(&w, z, t, cond)
    }

    fn forward_with(&self, w: &Weights, z: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, k, c, h, wd) = z.dims5().map_err(|_| Error::InvalidShape {
            what: "latent",
            expected: "[B, K, c, h, w]",
            got: z.dims().to_vec(),
        })?;
        if (c, h, wd) != (cfg.latent_channels, cfg.latent_height, cfg.latent_width) {
            return Err(Error::InvalidShape {
                what: "latent chunk",
                expected: "configured (c, h, w)",
                got: z.dims().to_vec(),
            });
        }
        let patch = Patch::spatial(cfg.patch);
        let grid = patch.grid(k, h, wd)?;
        let dtype = z.dtype();
        let device = z.device();

        let pos = space_time_positions(grid, cfg.width, dtype, device)?;
        let mut x = linear(&patchify(z, patch)?, w, "patch_embed")?.broadcast_add(&pos)?;

        let temb = timestep_embedding(t, b, cfg.width, dtype, device)?;
        let temb = linear(&linear(&temb, w, "t_embed.fc1")?.silu()?, w, "t_embed.fc2")?;
        let yemb = w.get("class_embed")?.index_select(cond, 0)?;
        let cvec = (temb + yemb)?;

        for i in 0..cfg.depth {
            x = block_forward(&x, &cvec, &w.sub(&format!("blocks.{i}")), cfg.heads)?;
        }
        let m = linear(&cvec.silu()?, w, "final_ada")?.chunk(2, D::Minus1)?;
        let x = modulate(&layer_norm(&x, LN_EPS)?, &m[0], &m[1])?;
        let out = linear(&x, w, "final")?;
        unpatchify(&out, patch, (k, c, h, wd))
    }
}

/// Tracked (trainable) view of a velocity net.
pub struct Tracked<'a>(pub &'a DitVelocityNet);

/// Gradient-blocked view of a velocity net.
pub struct Frozen<'a>(pub &'a DitVelocityNet);

impl VelocityField for Tracked<'_> {
    fn velocity(&self, z_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        ensure_finite(z_t, "generator input")?;
        self.0.forward(z_t, t, cond, false)
    }
}

impl VelocityField for Frozen<'_> {
    fn velocity(&self, z_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        ensure_finite(z_t, "generator input")?;
        self.0.forward(z_t, t, cond, true)
    }
}
