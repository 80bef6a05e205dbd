use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::flow::HornSchunck;
use crate::fm::DistilledTimesteps;
use crate::losses::LossWeights;
use crate::models::{DecoderConfig, DitConfig};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Order of the discriminator and adversarial generator updates within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// DMD, fake score, discriminator, then the generator's GAN update.
    #[default]
    DiscFirst,
    /// DMD, fake score, the generator's GAN update, then the discriminator.
    GenFirst,
}

/// Switches for the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Skip the DMD and fake-score updates once warm-up is over.
    pub no_dmd: bool,
    /// Drop both R1 and R2.
    pub no_r1r2: bool,
    /// Discriminate raw latent windows instead of motion.
    pub video_disc: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 3] = ["no_dmd", "no_r1r2", "video_disc"];

    /// Turn on one named switch.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_dmd" => self.no_dmd = true,
            "no_r1r2" => self.no_r1r2 = true,
            "video_disc" => self.video_disc = true,
            other => {
                return Err(Error::config(
                    "ablation",
                    format!("unknown ablation `{other}` (expected one of {:?})", Self::NAMES),
                ))
            }
        }
        Ok(())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated switch names; empty or `none` leaves everything off.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty() && *n != "none") {
            a.enable(name)?;
        }
        Ok(a)
    }
}

/// Decoded window of `len` latent chunks out of `chunks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub chunks: usize,
    pub len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { chunks: 4, len: 3 }
    }
}

/// Flow-matching pretraining of the teacher on encoded real clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub optim: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            optim: AdamWConfig::with_lr(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Total optimizer steps including warm-up.
    pub steps: u64,
    /// Leading DMD-only steps.
    pub warmup_steps: u64,
    /// Fake-score updates per generator update.
    pub fake_iters: usize,
    pub gen_batch: usize,
    pub disc_batch: usize,
    pub gen_optim: AdamWConfig,
    pub fake_optim: AdamWConfig,
    pub disc_optim: AdamWConfig,
    pub weights: LossWeights,
    pub order: UpdateOrder,
    pub ablation: Ablation,
    pub window: WindowConfig,
    pub timesteps: DistilledTimesteps,
    /// Range of the DMD and fake-score noise level.
    pub dmd_t_range: [f64; 2],
    pub model: DitConfig,
    pub discriminator: DiscriminatorConfig,
    pub decoder: DecoderConfig,
    pub flow: HornSchunck,
    pub pretrain: PretrainConfig,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    pub teacher_check_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            steps: 600,
            warmup_steps: 200,
            fake_iters: 4,
            gen_batch: 4,
            disc_batch: 8,
            gen_optim: AdamWConfig::with_lr(1e-5),
            fake_optim: AdamWConfig::with_lr(1e-5),
            disc_optim: AdamWConfig::with_lr(2e-5),
            weights: LossWeights::default(),
            order: UpdateOrder::DiscFirst,
            ablation: Ablation::default(),
            window: WindowConfig::default(),
            timesteps: DistilledTimesteps::default(),
            dmd_t_range: [0.02, 0.98],
            model: DitConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            decoder: DecoderConfig::default(),
            flow: HornSchunck::default(),
            pretrain: PretrainConfig::default(),
            checkpoint_every: 100,
            teacher_check_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Loss weights after the ablation switches are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.ablation.no_r1r2 {
            w.lambda_r1 = 0.0;
            w.lambda_r2 = 0.0;
        }
        w
    }

    /// Discriminator layout actually built, accounting for `video_disc`.
    pub fn effective_discriminator(&self) -> DiscriminatorConfig {
        if self.ablation.video_disc {
            DiscriminatorConfig {
                in_channels: self.decoder.latent_channels,
                patch: DiscriminatorConfig::video_space(self.decoder.latent_channels).patch,
                ..self.discriminator.clone()
            }
        } else {
            self.discriminator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        self.effective_discriminator().validate()?;
        for (field, o) in [
            ("gen_optim", &self.gen_optim),
            ("fake_optim", &self.fake_optim),
            ("disc_optim", &self.disc_optim),
            ("pretrain.optim", &self.pretrain.optim),
        ] {
            o.validate(field)?;
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("warmup_steps", "must not exceed steps"));
        }
        if self.gen_batch == 0 || self.disc_batch == 0 || self.pretrain.batch == 0 {
            return Err(Error::config("gen_batch", "batch sizes must be positive"));
        }
        let w = self.window;
        if w.len == 0 || w.len > w.chunks {
            return Err(Error::config(
                "window",
                format!("need 1 <= len <= chunks, got len {} of {}", w.len, w.chunks),
            ));
        }
        let [lo, hi] = self.dmd_t_range;
        if !(lo > crate::fm::T_MIN && lo <= hi && hi <= 1.0) {
            return Err(Error::config("dmd_t_range", format!("need t_min < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        let m = &self.model;
        let d = &self.decoder;
        if (m.latent_channels, m.latent_height, m.latent_width)
            != (d.latent_channels, d.latent_height, d.latent_width)
        {
            return Err(Error::config("model", "latent shape must match the decoder"));
        }
        if self.flow.iterations == 0 || self.flow.smoothness <= 0.0 {
            return Err(Error::config("flow", "iterations and smoothness must be positive"));
        }
        Ok(())
    }

    /// Frames covered by the full latent sequence.
    pub fn frames(&self) -> usize {
        self.window.chunks * self.decoder.frames_per_chunk()
    }

    pub fn latent_dims(&self, batch: usize) -> [usize; 5] {
        let d = &self.decoder;
        [batch, self.window.chunks, d.latent_channels, d.latent_height, d.latent_width]
    }

    /// Whether step `step` (zero-based) is still in warm-up. The warm-up is
    /// pure DMD, so `no_dmd` has none.
    pub fn in_warmup(&self, step: u64) -> bool {
        !self.ablation.no_dmd && step < self.warmup_steps
    }

    /// Whether the DMD and fake-score phases run.
    pub fn dmd_active(&self) -> bool {
        self.weights.dmd_weight > 0.0 && !self.ablation.no_dmd
    }

    /// Whether the adversarial phases run at `step`.
    pub fn gan_active(&self, step: u64) -> bool {
        !self.in_warmup(step) && self.effective_weights().gan_enabled()
    }
}
