//! MoGAN post-training: DMD distillation plus a motion-space discriminator on
//! decoded, flow-estimated windows.

mod config;
mod pretrain;
mod run;
mod sample;
mod state;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use config::{Ablation, Precision, PretrainConfig, TrainConfig, UpdateOrder, WindowConfig};
pub use pretrain::{load_teacher, pretrain_teacher, save_teacher};
pub use run::{RunDir, StepRecorder};
pub use sample::GeneratorSource;
pub use state::{CheckpointInfo, TrainState};

use crate::data::{Dataset, PromptSet, Split};
use crate::discriminator::Critic;
use crate::error::{Error, Result};
use crate::flow::{flow_to_motion, FlowEstimator, HornSchunck};
use crate::fm::{backward_simulate, velocity_to_x0, LatentSpec, VelocityField};
use crate::losses::{
    dmd_loss_sampled, fake_score_loss, gan_d_loss_from_logits, gan_g_loss, r_regularizer, LossWeights,
};
use crate::models::ChunkRecurrentDecoder;
use crate::nn::grad_norm;
use crate::tensor::{scalar, SeededRng};

/// Sub-seed tags, so each component draws from its own stream.
pub(crate) const TAG_TEACHER: u64 = 1;
pub(crate) const TAG_PRETRAIN: u64 = 2;
pub(crate) const TAG_DISC: u64 = 3;
pub(crate) const TAG_TRAIN: u64 = 4;

/// Encoded real clips and the prompts that condition the generator.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// `[N, K, c, h, w]`.
    pub latents: Tensor,
    pub classes: Vec<u32>,
    pub prompts: PromptSet,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset, decoder: &ChunkRecurrentDecoder, cfg: &TrainConfig) -> Result<Self> {
        let (videos, classes) = ds.videos(Split::Train, cfg.dtype())?;
        if videos.frames() != cfg.frames() {
            return Err(Error::config(
                "window.chunks",
                format!(
                    "{} chunks of {} frames do not cover {}-frame clips",
                    cfg.window.chunks,
                    cfg.decoder.frames_per_chunk(),
                    videos.frames()
                ),
            ));
        }
        if ds.config.num_classes() != cfg.model.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("dataset has {} classes", ds.config.num_classes()),
            ));
        }
        Ok(Self {
            latents: decoder.encode(&videos)?,
            classes,
            prompts: ds.prompts.train.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Latents and classes at random indices.
    pub(crate) fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        let idx: Vec<u32> = (0..n).map(|_| rng.index(self.len()) as u32).collect();
        let classes: Vec<u32> = idx.iter().map(|&i| self.classes[i as usize]).collect();
        let device = self.latents.device();
        let z = self.latents.index_select(&Tensor::new(idx.as_slice(), device)?, 0)?;
        Ok((z, Tensor::new(classes.as_slice(), device)?))
    }

    /// Class labels of `n` prompts drawn at random.
    pub(crate) fn sample_cond(&self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let p = self.prompts.prompts();
        let classes: Vec<u32> = (0..n).map(|_| p[rng.index(p.len())].class).collect();
        Ok(Tensor::new(classes.as_slice(), self.latents.device())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Adversarial,
}

/// One line of `metrics.jsonl`. Absent terms are omitted from the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Number of completed steps after this one.
    pub step: u64,
    pub phase: Phase,
    /// Distilled step index picked by backward simulation.
    pub sim_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_dmd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dmd_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm_dmd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_fake: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm_fake: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gan_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gan_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    /// `λ1 L_g`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_gan_total: Option<f64>,
    /// `λ2 L_d + λR1 R1 + λR2 R2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_real: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_gen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm_gan: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm_disc: Option<f64>,
    pub weights: LossWeights,
}

impl StepMetrics {
    fn new(step: u64, phase: Phase, weights: LossWeights) -> Self {
        Self {
            step,
            phase,
            sim_index: 0,
            loss_dmd: None,
            dmd_t: None,
            grad_norm_dmd: None,
            loss_fake: None,
            grad_norm_fake: None,
            window_start: None,
            loss_gan_g: None,
            loss_gan_d: None,
            r1: None,
            r2: None,
            gen_gan_total: None,
            disc_total: None,
            logit_real: None,
            logit_gen: None,
            grad_norm_gan: None,
            grad_norm_disc: None,
            weights,
        }
    }
}

/// Scalar value of a loss, or the abort error if it is not finite.
fn checked(loss: &Tensor, name: &'static str, step: u64) -> Result<f64> {
    let v = scalar(loss)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            loss: name,
            batch_id: step,
        })
    }
}

/// Owns the frozen pieces of a run (decoder, flow estimator, data) and drives
/// [`TrainState`] one step at a time.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    decoder: ChunkRecurrentDecoder,
    flow: HornSchunck,
    data: TrainData,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let d = data.latents.dims();
        let want = cfg.latent_dims(d.first().copied().unwrap_or(0));
        if d != want || data.is_empty() {
            return Err(Error::InvalidShape {
                what: "training latents",
                expected: "[N, chunks, c, h, w] matching the config",
                got: d.to_vec(),
            });
        }
        if data.prompts.is_empty() {
            return Err(Error::config("data.prompts", "no training prompts"));
        }
        let decoder = ChunkRecurrentDecoder::new(cfg.decoder.clone(), cfg.dtype(), data.latents.device())?;
        Ok(Self {
            weights: cfg.effective_weights(),
            flow: cfg.flow.clone(),
            decoder,
            data,
            cfg,
        })
    }

    /// The decoder a config builds, for encoding data before a trainer exists.
    pub fn build_decoder(cfg: &TrainConfig, device: &Device) -> Result<ChunkRecurrentDecoder> {
        ChunkRecurrentDecoder::new(cfg.decoder.clone(), cfg.dtype(), device)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn decoder(&self) -> &ChunkRecurrentDecoder {
        &self.decoder
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn device(&self) -> &Device {
        self.data.latents.device()
    }

    /// Flow-estimator calls made by this trainer so far.
    pub fn flow_invocations(&self) -> usize {
        self.flow.invocations()
    }

    /// Fresh state around a pretrained teacher.
    pub fn init_state(&self, teacher: crate::models::TeacherNet) -> Result<TrainState> {
        TrainState::init(&self.cfg, teacher)
    }

    /// Discriminator input for a latent batch: the motion tensor of the decoded
    /// window, or the raw latent window under `video_disc`. With `tracked`
    /// unset the latents are detached first.
    pub fn disc_input(&self, latents: &Tensor, start: usize, tracked: bool) -> Result<Tensor> {
        let latents = if tracked { latents.clone() } else { latents.detach() };
        let len = self.cfg.window.len;
        if self.cfg.ablation.video_disc {
            return Ok(latents.narrow(1, start, len)?);
        }
        let (video, _) = self.decoder.decode_window(&latents, start, len)?;
        let flow = self.flow.estimate(&video)?;
        Ok(flow_to_motion(&flow)?.into_inner())
    }

    fn spec(&self, batch: usize) -> LatentSpec {
        LatentSpec::new(&self.cfg.latent_dims(batch), self.cfg.dtype(), self.device())
    }

    /// Run one full optimizer step and advance `state.step`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        let cfg = &self.cfg;
        let s = state.step;
        let phase = if cfg.in_warmup(s) { Phase::Warmup } else { Phase::Adversarial };
        let mut m = StepMetrics::new(s + 1, phase, self.weights.clone());
        let t_range = (cfg.dmd_t_range[0], cfg.dmd_t_range[1]);
        let dmd = cfg.dmd_active();
        let gan = cfg.gan_active(s);

        // Backward simulation with the current generator; its noisy latent is
        // reused by the adversarial generator update.
        let cond = self.data.sample_cond(cfg.gen_batch, &mut state.rng)?;
        let spec = self.spec(cfg.gen_batch);
        let sim = if dmd {
            backward_simulate(&state.generator.tracked(), &cfg.timesteps, &cond, &spec, &mut state.rng)?
        } else {
            backward_simulate(&state.generator.frozen(), &cfg.timesteps, &cond, &spec, &mut state.rng)?
        };
        m.sim_index = sim.index;

        if dmd {
            let out = dmd_loss_sampled(
                &state.teacher.velocity_field(),
                &state.fake.frozen(),
                &sim.x0,
                &cond,
                t_range,
                &mut state.rng,
            )?;
            let loss = (&out.loss * cfg.weights.dmd_weight)?;
            m.loss_dmd = Some(checked(&out.loss, "loss_dmd", s)?);
            m.dmd_t = Some(out.t);
            let grads = loss.backward()?;
            m.grad_norm_dmd = Some(grad_norm(state.generator.params(), &grads)?);
            state.gen_opt.step(state.generator.params(), &grads)?;

            let (mut total, mut gnorm) = (0.0, 0.0);
            for _ in 0..cfg.fake_iters {
                let c = self.data.sample_cond(cfg.gen_batch, &mut state.rng)?;
                let fresh = backward_simulate(&state.generator.frozen(), &cfg.timesteps, &c, &spec, &mut state.rng)?;
                let t = state.rng.uniform(t_range.0, t_range.1);
                let eps = state.rng.normal_like(&fresh.x0)?;
                let loss = fake_score_loss(&state.fake.tracked(), &fresh.x0, &c, t, &eps)?;
                total += checked(&loss, "loss_fake", s)?;
                let grads = loss.backward()?;
                gnorm += grad_norm(state.fake.params(), &grads)?;
                state.fake_opt.step(state.fake.params(), &grads)?;
            }
            if cfg.fake_iters > 0 {
                m.loss_fake = Some(total / cfg.fake_iters as f64);
                m.grad_norm_fake = Some(gnorm / cfg.fake_iters as f64);
            }
        }

        if gan {
            let start = state.rng.index(cfg.window.chunks - cfg.window.len + 1);
            m.window_start = Some(start);
            match cfg.order {
                UpdateOrder::DiscFirst => {
                    self.disc_update(state, start, &mut m)?;
                    self.gen_gan_update(state, &sim.noisy, sim.t, &cond, start, &mut m)?;
                }
                UpdateOrder::GenFirst => {
                    self.gen_gan_update(state, &sim.noisy, sim.t, &cond, start, &mut m)?;
                    self.disc_update(state, start, &mut m)?;
                }
            }
        }

        state.step += 1;
        if cfg.teacher_check_every > 0 && state.step % cfg.teacher_check_every == 0 {
            state.verify_teacher()?;
        }
        Ok(m)
    }

    fn disc_update(&self, state: &mut TrainState, start: usize, m: &mut StepMetrics) -> Result<()> {
        let cfg = &self.cfg;
        let s = state.step;
        let w = &self.weights;
        let cond = self.data.sample_cond(cfg.disc_batch, &mut state.rng)?;
        let spec = self.spec(cfg.disc_batch);
        let fake = backward_simulate(&state.generator.frozen(), &cfg.timesteps, &cond, &spec, &mut state.rng)?;
        let (real, _) = self.data.sample(cfg.disc_batch, &mut state.rng)?;
        let o_real = self.disc_input(&real, start, false)?;
        let o_gen = self.disc_input(&fake.x0, start, false)?;

        let d = state.disc.tracked();
        let b = o_real.dims()[0];
        let both = d.logits(&Tensor::cat(&[&o_real, &o_gen], 0)?)?;
        let (lr, lg) = (both.narrow(0, 0, b)?, both.narrow(0, b, o_gen.dims()[0])?);
        let gan_d = gan_d_loss_from_logits(&lr, &lg)?;
        m.loss_gan_d = Some(checked(&gan_d, "loss_gan_d", s)?);
        m.logit_real = Some(scalar(&lr.mean_all()?)?);
        m.logit_gen = Some(scalar(&lg.mean_all()?)?);
        let mut total = (&gan_d * w.lambda2)?;
        if w.lambda_r1 > 0.0 {
            let r1 = r_regularizer(&d, &o_real, w.sigma, &mut state.rng)?;
            m.r1 = Some(checked(&r1, "r1", s)?);
            total = (total + (r1 * w.lambda_r1)?)?;
        }
        if w.lambda_r2 > 0.0 {
            let r2 = r_regularizer(&d, &o_gen, w.sigma, &mut state.rng)?;
            m.r2 = Some(checked(&r2, "r2", s)?);
            total = (total + (r2 * w.lambda_r2)?)?;
        }
        m.disc_total = Some(checked(&total, "disc_total", s)?);
        let grads = total.backward()?;
        m.grad_norm_disc = Some(grad_norm(state.disc.params(), &grads)?);
        state.disc_opt.step(state.disc.params(), &grads)?;
        Ok(())
    }

    fn gen_gan_update(
        &self,
        state: &mut TrainState,
        noisy: &Tensor,
        t: f64,
        cond: &Tensor,
        start: usize,
        m: &mut StepMetrics,
    ) -> Result<()> {
        let s = state.step;
        let v = state.generator.tracked().velocity(noisy, t, cond)?;
        let x0 = velocity_to_x0(noisy, &v, t)?;
        let o = self.disc_input(&x0, start, true)?;
        let gan_g = gan_g_loss(&state.disc.frozen(), &o)?;
        m.loss_gan_g = Some(checked(&gan_g, "loss_gan_g", s)?);
        let total = (&gan_g * self.weights.lambda1)?;
        m.gen_gan_total = Some(scalar(&total)?);
        if self.weights.lambda1 > 0.0 {
            let grads = total.backward()?;
            m.grad_norm_gan = Some(grad_norm(state.generator.params(), &grads)?);
            state.gen_opt.step(state.generator.params(), &grads)?;
        }
        Ok(())
    }

    /// Step until `state.step == until`, handing each record to `on_step`.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: u64,
        mut on_step: impl FnMut(&StepMetrics, &TrainState) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while state.step < until {
            let m = self.step(state)?;
            on_step(&m, state)?;
            out.push(m);
        }
        Ok(out)
    }
}
