#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use mogan_core::data::{generate_clip, generate_dataset, DatasetConfig, SpriteSpec, SyntheticClipSpec, Trajectory};
use mogan_core::trainer::{pretrain_teacher, TrainConfig, TrainData, TrainState, Trainer};
use mogan_core::{Device, FlowField, VideoTensor};

/// Corpus small enough to render in well under a second.
pub fn tiny_data(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train_clips: 8,
        eval_clips: 8,
        seed,
        ..DatasetConfig::default()
    }
}

/// Full pipeline at toy width: one-block generator, default discriminator.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        steps: 6,
        warmup_steps: 2,
        fake_iters: 1,
        gen_batch: 2,
        disc_batch: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.model.width = 32;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.pretrain.steps = 3;
    cfg.pretrain.batch = 4;
    cfg
}

pub fn tiny_trainer(cfg: TrainConfig) -> (Trainer, TrainState) {
    let ds = generate_dataset(&tiny_data(cfg.seed)).unwrap();
    let decoder = Trainer::build_decoder(&cfg, &Device::Cpu).unwrap();
    let data = TrainData::from_dataset(&ds, &decoder, &cfg).unwrap();
    let teacher = pretrain_teacher(&cfg, &data, |_, _| {}).unwrap();
    let trainer = Trainer::new(cfg, data).unwrap();
    let state = trainer.init_state(teacher).unwrap();
    (trainer, state)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Overwrite one flat coordinate of a variable.
pub fn set_coord(var: &Var, idx: usize, value: f64) {
    let mut v = values(var.as_tensor());
    v[idx] = value;
    let t = Tensor::from_vec(v, var.as_tensor().dims(), var.device()).unwrap();
    var.set(&t.to_dtype(var.dtype()).unwrap()).unwrap();
}

/// Central difference of `f` along one coordinate of `var`, restoring it afterwards.
pub fn central_difference(var: &Var, idx: usize, h: f64, f: &mut dyn FnMut() -> f64) -> f64 {
    let x = values(var.as_tensor())[idx];
    set_coord(var, idx, x + h);
    let up = f();
    set_coord(var, idx, x - h);
    let down = f();
    set_coord(var, idx, x);
    (up - down) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Fraction of coordinates whose relative error is below `tol`.
pub fn fraction_within(analytic: &[f64], numeric: &[f64], tol: f64) -> f64 {
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| rel_err(**a, **n) < tol)
        .count();
    ok as f64 / analytic.len() as f64
}

/// Serialized form used for bit-level comparison of metric streams.
pub fn metric_lines(ms: &[mogan_core::trainer::StepMetrics]) -> Vec<String> {
    ms.iter().map(|m| serde_json::to_string(m).unwrap()).collect()
}

/// Textured background sliding at `velocity` px/frame, no sprites.
pub fn background_clip(velocity: [f64; 2], frames: usize, seed: u64) -> (VideoTensor, FlowField) {
    let spec = SyntheticClipSpec {
        frames,
        height: 32,
        width: 32,
        sprites: vec![],
        background_velocity: velocity,
        background_seed: seed,
        jitter: 0.0,
    };
    generate_clip(&spec, seed).unwrap()
}

/// One sprite over a still background.
pub fn sprite_clip(trajectory: Trajectory, velocity: [f64; 2], frames: usize, seed: u64) -> (VideoTensor, FlowField) {
    let spec = SyntheticClipSpec {
        frames,
        height: 32,
        width: 32,
        sprites: vec![SpriteSpec {
            radius: 7.0,
            start: [16.0, 16.0],
            velocity,
            trajectory,
            orbit_radius: 6.0,
            angular_step: 0.3,
            texture_seed: seed + 1,
        }],
        background_velocity: [0.0, 0.0],
        background_seed: seed,
        jitter: 0.0,
    };
    generate_clip(&spec, seed).unwrap()
}

pub fn tensor_f64(data: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
}
