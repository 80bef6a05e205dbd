use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;

use super::{TrainConfig, TrainData, TAG_PRETRAIN, TAG_TEACHER};
use crate::checkpoint::{read_safetensors, write_safetensors, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::fm::noise_to_level;
use crate::models::{DitConfig, DitVelocityNet, TeacherNet};
use crate::nn::ParamSet;
use crate::optim::AdamW;
use crate::tensor::{mix_seed, scalar, SeededRng};

/// Fit the teacher velocity field to the encoded training clips by flow
/// matching, `mean (v(z_t, t) - (ε - z0))²` with one `t ~ U[0, 1]` per batch.
/// `on_step` receives `(step, loss)` after each update.
pub fn pretrain_teacher(
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TeacherNet> {
    cfg.validate()?;
    let device = data.latents.device();
    let net = DitVelocityNet::init(cfg.model.clone(), mix_seed(cfg.seed, TAG_TEACHER), cfg.dtype(), device)?;
    let mut opt = AdamW::new(cfg.pretrain.optim.clone());
    let mut rng = SeededRng::derived(cfg.seed, TAG_PRETRAIN);
    for step in 0..cfg.pretrain.steps {
        let (z0, cond) = data.sample(cfg.pretrain.batch, &mut rng)?;
        let t = rng.uniform(0.0, 1.0);
        let eps = rng.normal_like(&z0)?;
        let z_t = noise_to_level(&z0, t, &eps)?;
        let v = net.forward(&z_t, t, &cond, false)?;
        let loss = (v - (eps - &z0)?)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: "loss_teacher",
                batch_id: step,
            });
        }
        opt.step(net.params(), &loss.backward()?)?;
        on_step(step + 1, value);
    }
    Ok(TeacherNet::new(net))
}

pub fn save_teacher(path: &Path, teacher: &TeacherNet) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
    meta.insert("model".into(), serde_json::to_string(teacher.config())?);
    meta.insert("hash".into(), teacher.content_hash()?);
    write_safetensors(path, &teacher.params().to_map(), meta)
}

/// Load a teacher and check it against the expected architecture and its stored hash.
pub fn load_teacher(path: &Path, cfg: &TrainConfig, device: &Device) -> Result<TeacherNet> {
    let (tensors, meta) = read_safetensors(path, device)?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let model: DitConfig = serde_json::from_str(meta.get("model").ok_or_else(|| bad("missing `model`".into()))?)?;
    if model != cfg.model {
        return Err(Error::Incompatible("teacher architecture differs from `model`".into()));
    }
    let mut params = ParamSet::new(cfg.dtype(), device);
    for (k, v) in &tensors {
        params.insert(k.clone(), &v.to_dtype(cfg.dtype())?)?;
    }
    let teacher = TeacherNet::new(DitVelocityNet::from_params(model, params)?);
    if let Some(h) = meta.get("hash") {
        if teacher.params().dtype() == tensors.values().next().map(|t| t.dtype()).unwrap_or(cfg.dtype())
            && &teacher.content_hash()? != h
        {
            return Err(bad("parameter hash mismatch".into()));
        }
    }
    Ok(teacher)
}
