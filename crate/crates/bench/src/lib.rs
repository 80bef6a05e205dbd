//! Fixtures shared by the criterion benches.

use mogan_core::data::{generate_clip, generate_dataset, DatasetConfig, SpriteSpec, SyntheticClipSpec, Trajectory};
use mogan_core::fm::LatentSpec;
use mogan_core::trainer::{pretrain_teacher, TrainConfig, TrainData, TrainState, Trainer};
use mogan_core::{Device, Result, SeededRng, Tensor, VideoTensor};

/// One textured sprite drifting over a still background.
pub fn sprite_clip(frames: usize, size: usize) -> Result<VideoTensor> {
    let spec = SyntheticClipSpec {
        frames,
        height: size,
        width: size,
        sprites: vec![SpriteSpec {
            radius: size as f64 / 5.0,
            start: [size as f64 / 2.0, size as f64 / 2.0],
            velocity: [1.5, 0.5],
            trajectory: Trajectory::Linear,
            orbit_radius: 0.0,
            angular_step: 0.0,
            texture_seed: 1,
        }],
        background_velocity: [0.0, 0.0],
        background_seed: 0,
        jitter: 0.0,
    };
    Ok(generate_clip(&spec, 0)?.0)
}

/// Training config at the width used by the end-to-end runs.
pub fn bench_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 1000,
        warmup_steps: 0,
        fake_iters: 1,
        gen_batch: 2,
        disc_batch: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.model.width = 32;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.pretrain.steps = 1;
    cfg.pretrain.batch = 2;
    cfg
}

/// Trainer and fresh state on an eight-clip corpus, past warm-up.
pub fn bench_trainer() -> Result<(Trainer, TrainState)> {
    let cfg = bench_config();
    let ds = generate_dataset(&DatasetConfig {
        train_clips: 8,
        eval_clips: 8,
        ..DatasetConfig::default()
    })?;
    let decoder = Trainer::build_decoder(&cfg, &Device::Cpu)?;
    let data = TrainData::from_dataset(&ds, &decoder, &cfg)?;
    let teacher = pretrain_teacher(&cfg, &data, |_, _| {})?;
    let trainer = Trainer::new(cfg, data)?;
    let state = trainer.init_state(teacher)?;
    Ok((trainer, state))
}

/// Gaussian latents and class labels for a batch of `batch`.
pub fn latent_batch(cfg: &TrainConfig, batch: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let spec = LatentSpec::new(&cfg.latent_dims(batch), cfg.dtype(), &Device::Cpu);
    let z = spec.noise(&mut SeededRng::new(seed))?;
    let labels: Vec<u32> = (0..batch as u32).collect();
    Ok((z, Tensor::new(labels.as_slice(), &Device::Cpu)?))
}
