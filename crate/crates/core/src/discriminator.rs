//! DiT motion discriminator with multi-depth prediction heads.
//!
//! The timestep is pinned to zero and the condition to a learned "good motion"
//! token at construction; neither is reachable through the public API.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::dit::{block_forward, init_block, patchify, space_time_positions, Patch};
use crate::nn::{layer_norm, linear, softmax_last, timestep_embedding, ParamBuilder, ParamSet, Weights};
use crate::tensor::ensure_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// 3 for motion tensors, latent channels for the video-space variant.
    pub in_channels: usize,
    pub patch: Patch,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices after which a prediction head reads the tokens.
    pub head_depths: Vec<usize>,
    pub head_width: usize,
    pub fusion_width: usize,
    /// Zero the last layer of every head, so all head outputs start at zero.
    pub zero_init_heads: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch: Patch {
                frames: 2,
                rows: 8,
                cols: 8,
            },
            width: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 2,
            head_depths: vec![3, 5, 6],
            head_width: 64,
            fusion_width: 64,
            zero_init_heads: false,
        }
    }
}

impl DiscriminatorConfig {
    /// Same backbone reading raw latent windows instead of motion tensors.
    pub fn video_space(latent_channels: usize) -> Self {
        Self {
            in_channels: latent_channels,
            patch: Patch {
                frames: 1,
                rows: 2,
                cols: 2,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 || self.width % 4 != 0 {
            return Err(Error::config(
                "discriminator.width",
                "must be divisible by 4 and by heads",
            ));
        }
        if self.head_depths.is_empty() {
            return Err(Error::config("discriminator.head_depths", "need at least one head"));
        }
        if self
            .head_depths
            .iter()
            .any(|&d| d == 0 || d > self.depth)
        {
            return Err(Error::config(
                "discriminator.head_depths",
                format!("entries must lie in [1, {}]", self.depth),
            ));
        }
        let mut sorted = self.head_depths.clone();
        sorted.dedup();
        if sorted.len() != self.head_depths.len() || sorted.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "discriminator.head_depths",
                "must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// Scalar critic over `[B, ...]` inputs returning `[B]` logits.
///
/// Implemented by the gradient-tracked and frozen views of
/// [`MotionDiscriminator`] and by any closure, which lets the losses be tested
/// against analytic critics.
pub trait Critic {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> Critic for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub struct MotionDiscriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
}

/// View of a discriminator with trainable (`frozen == false`) or blocked weights.
#[derive(Clone, Copy)]
pub struct DiscView<'a> {
    d: &'a MotionDiscriminator,
    frozen: bool,
}

impl Critic for DiscView<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.d.forward(x, self.frozen).map(|(l, _)| l)
    }
}

impl MotionDiscriminator {
    pub fn init(cfg: DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut b = ParamBuilder::new(seed, dtype, device);
        b.linear("patch_embed", cfg.patch.token_dim(cfg.in_channels), d, false)?;
        b.normal("good_motion", &[1, d], 0.02)?;
        b.linear("t_embed.fc1", d, d, false)?;
        b.linear("t_embed.fc2", d, d, false)?;
        for i in 0..cfg.depth {
            b.push(format!("blocks.{i}"));
            init_block(&mut b, d, cfg.mlp_ratio, false)?;
            b.pop();
        }
        for j in 0..cfg.head_depths.len() {
            b.push(format!("heads.{j}"));
            b.normal("aux", &[1, d], 0.02)?;
            b.linear("q", d, d, false)?;
            b.linear("k", d, d, false)?;
            b.linear("v", d, d, false)?;
            b.linear("fc1", d, cfg.head_width, false)?;
            b.linear("fc2", cfg.head_width, cfg.head_width, cfg.zero_init_heads)?;
            b.pop();
        }
        let cat = cfg.head_width * cfg.head_depths.len();
        b.linear("fusion.fc1", cat, cfg.fusion_width, false)?;
        b.linear("fusion.fc2", cfg.fusion_width, 1, false)?;
        Ok(Self {
            cfg,
            params: b.finish(),
        })
    }

    pub fn from_params(cfg: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
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

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn input_channels(&self) -> usize {
        self.cfg.in_channels
    }

    /// Gradients reach the discriminator parameters.
    pub fn tracked(&self) -> DiscView<'_> {
        DiscView {
            d: self,
            frozen: false,
        }
    }

    /// Gradients reach only the input.
    pub fn frozen(&self) -> DiscView<'_> {
        DiscView {
            d: self,
            frozen: true,
        }
    }

    /// `[B]` logits with trainable weights.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.tracked().logits(x)
    }

    /// One `[B, head_width]` feature per head depth.
    pub fn head_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward(x, false).map(|(_, h)| h)
    }

    fn forward(&self, x: &Tensor, frozen: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let w = if frozen {
            self.params.frozen()
        } else {
            self.params.tracked()
        };
        self.forward_with(&w, x)
    }

    fn forward_with(&self, w: &Weights, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let cfg = &self.cfg;
        let (b, t, c, h, wd) = x.dims5().map_err(|_| Error::InvalidShape {
            what: "discriminator input",
            expected: "[B, T, C, H, W]",
            got: x.dims().to_vec(),
        })?;
        if c != cfg.in_channels {
            return Err(Error::InvalidShape {
                what: "discriminator input channels",
                expected: "configured in_channels",
                got: x.dims().to_vec(),
            });
        }
        ensure_finite(x, "discriminator input")?;
        let dtype = x.dtype();
        let device = x.device();
        let grid = (t / cfg.patch.frames, h / cfg.patch.rows, wd / cfg.patch.cols);
        let pos = space_time_positions(grid, cfg.width, dtype, device)?;
        let mut tokens = linear(&patchify(x, cfg.patch)?, w, "patch_embed")?.broadcast_add(&pos)?;

        let temb = timestep_embedding(0.0, b, cfg.width, dtype, device)?;
        let temb = linear(&linear(&temb, w, "t_embed.fc1")?.silu()?, w, "t_embed.fc2")?;
        let cond = temb.broadcast_add(&w.get("good_motion")?)?;

        let mut feats = Vec::with_capacity(cfg.head_depths.len());
        for i in 0..cfg.depth {
            tokens = block_forward(&tokens, &cond, &w.sub(&format!("blocks.{i}")), cfg.heads)?;
            if let Some(j) = cfg.head_depths.iter().position(|&d| d == i + 1) {
                feats.push(head(&tokens, &w.sub(&format!("heads.{j}")), cfg.width)?);
            }
        }
        let cat = Tensor::cat(&feats, D::Minus1)?;
        let hidden = linear(&cat, w, "fusion.fc1")?.gelu_erf()?;
        let logit = linear(&hidden, w, "fusion.fc2")?.squeeze(D::Minus1)?;
        Ok((logit, feats))
    }
}

/// Auxiliary-token cross-attention pooling followed by a two-layer MLP.
fn head(tokens: &Tensor, w: &Weights, width: usize) -> Result<Tensor> {
    let x = layer_norm(tokens, 1e-6)?;
    let q = linear(&w.get("aux")?, w, "q")?.unsqueeze(0)?;
    let k = linear(&x, w, "k")?;
    let v = linear(&x, w, "v")?;
    let scores = (q.broadcast_matmul(&k.transpose(1, 2)?.contiguous()?)? / (width as f64).sqrt())?;
    let pooled = softmax_last(&scores)?.matmul(&v)?.squeeze(1)?;
    let h = linear(&pooled, w, "fc1")?.gelu_erf()?;
    linear(&h, w, "fc2")
}
