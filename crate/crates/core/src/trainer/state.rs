use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use super::{TrainConfig, TAG_DISC, TAG_TRAIN};
use crate::checkpoint::{read_safetensors, write_safetensors, CHECKPOINT_VERSION};
use crate::discriminator::MotionDiscriminator;
use crate::error::{Error, Result};
use crate::models::{DitVelocityNet, FakeScoreNet, GeneratorNet, TeacherNet};
use crate::nn::ParamSet;
use crate::optim::AdamW;
use crate::tensor::{mix_seed, RngState, SeededRng};

/// Everything that changes during training.
///
/// Not `Clone`: parameter sets share storage when cloned, so use
/// [`TrainState::fork`] for an independent copy.
#[derive(Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub generator: GeneratorNet,
    pub teacher: TeacherNet,
    pub fake: FakeScoreNet,
    pub disc: MotionDiscriminator,
    pub gen_opt: AdamW,
    pub fake_opt: AdamW,
    pub disc_opt: AdamW,
    pub rng: SeededRng,
    teacher_hash: String,
}

const NETS: [&str; 4] = ["generator", "teacher", "fake", "disc"];

fn prefixed(prefix: &str, map: BTreeMap<String, Tensor>, out: &mut BTreeMap<String, Tensor>) {
    for (k, v) in map {
        out.insert(format!("{prefix}/{k}"), v);
    }
}

fn section(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}/");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
        .collect()
}

fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("missing metadata `{key}`"),
    })
}

fn parse_u64(s: &str, path: &Path) -> Result<u64> {
    s.parse().map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad integer `{s}`"),
    })
}

/// Fresh parameter set shaped like `reference`, holding the stored values.
fn load_params(reference: &ParamSet, values: &BTreeMap<String, Tensor>) -> Result<ParamSet> {
    let p = reference.deep_copy()?;
    p.load(values)?;
    Ok(p)
}

/// Header of a training checkpoint, readable without loading any weights.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
}

impl CheckpointInfo {
    pub fn read(path: &Path) -> Result<Self> {
        let (_, meta) = read_safetensors(path, &Device::Cpu)?;
        let version = meta_get(&meta, "version", path)?;
        let version: u32 = version.parse().map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("bad version `{version}`"),
        })?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "{} has checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        Ok(Self {
            version,
            step: parse_u64(meta_get(&meta, "step", path)?, path)?,
            config: serde_json::from_str(meta_get(&meta, "config", path)?)?,
        })
    }
}

impl TrainState {
    /// Generator and fake score start as copies of the teacher.
    pub fn init(cfg: &TrainConfig, teacher: TeacherNet) -> Result<Self> {
        if teacher.config() != &cfg.model {
            return Err(Error::Incompatible("teacher architecture differs from `model`".into()));
        }
        let device = teacher.params().device().clone();
        let disc = MotionDiscriminator::init(
            cfg.effective_discriminator(),
            mix_seed(cfg.seed, TAG_DISC),
            cfg.dtype(),
            &device,
        )?;
        Ok(Self {
            step: 0,
            generator: GeneratorNet::from_teacher(&teacher)?,
            fake: FakeScoreNet::from_teacher(&teacher)?,
            teacher_hash: teacher.content_hash()?,
            teacher,
            disc,
            gen_opt: AdamW::new(cfg.gen_optim.clone()),
            fake_opt: AdamW::new(cfg.fake_optim.clone()),
            disc_opt: AdamW::new(cfg.disc_optim.clone()),
            rng: SeededRng::derived(cfg.seed, TAG_TRAIN),
        })
    }

    /// Independent deep copy, e.g. to branch several arms off one warm-up.
    pub fn fork(&self) -> Result<Self> {
        Ok(Self {
            step: self.step,
            generator: GeneratorNet(self.generator.0.deep_copy()?),
            teacher: TeacherNet::new(DitVelocityNet::from_params(
                self.teacher.config().clone(),
                self.teacher.params().deep_copy()?,
            )?),
            fake: FakeScoreNet(self.fake.0.deep_copy()?),
            disc: MotionDiscriminator::from_params(self.disc.config().clone(), self.disc.params().deep_copy()?)?,
            gen_opt: self.gen_opt.clone(),
            fake_opt: self.fake_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            rng: self.rng.clone(),
            teacher_hash: self.teacher_hash.clone(),
        })
    }

    /// Switch to another arm's config at a fork point. The discriminator is
    /// rebuilt from its seed, which matches a run that used `cfg` from the
    /// start as long as no discriminator update has happened yet.
    pub fn adopt(&mut self, cfg: &TrainConfig) -> Result<()> {
        if self.disc_opt.steps() > 0 {
            return Err(Error::Incompatible(format!(
                "cannot switch arms after {} discriminator updates",
                self.disc_opt.steps()
            )));
        }
        if self.teacher.config() != &cfg.model {
            return Err(Error::Incompatible("teacher architecture differs from `model`".into()));
        }
        let device = self.teacher.params().device().clone();
        self.disc = MotionDiscriminator::init(
            cfg.effective_discriminator(),
            mix_seed(cfg.seed, TAG_DISC),
            cfg.dtype(),
            &device,
        )?;
        self.disc_opt = AdamW::new(cfg.disc_optim.clone());
        Ok(())
    }

    /// Error out if the teacher's weights moved since initialization.
    pub fn verify_teacher(&self) -> Result<()> {
        if self.teacher.content_hash()? == self.teacher_hash {
            Ok(())
        } else {
            Err(Error::TeacherModified { step: self.step })
        }
    }

    pub fn teacher_hash(&self) -> &str {
        &self.teacher_hash
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut tensors = BTreeMap::new();
        prefixed("generator", self.generator.params().to_map(), &mut tensors);
        prefixed("teacher", self.teacher.params().to_map(), &mut tensors);
        prefixed("fake", self.fake.params().to_map(), &mut tensors);
        prefixed("disc", self.disc.params().to_map(), &mut tensors);
        prefixed("opt.gen", self.gen_opt.state_tensors(), &mut tensors);
        prefixed("opt.fake", self.fake_opt.state_tensors(), &mut tensors);
        prefixed("opt.disc", self.disc_opt.state_tensors(), &mut tensors);
        let mut meta = HashMap::new();
        meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("rng".into(), serde_json::to_string(&self.rng.state())?);
        meta.insert("config".into(), serde_json::to_string(cfg)?);
        meta.insert("opt.gen.steps".into(), self.gen_opt.steps().to_string());
        meta.insert("opt.fake.steps".into(), self.fake_opt.steps().to_string());
        meta.insert("opt.disc.steps".into(), self.disc_opt.steps().to_string());
        meta.insert("teacher_hash".into(), self.teacher_hash.clone());
        write_safetensors(path, &tensors, meta)
    }

    /// Restore a state saved by [`TrainState::save`]. The architecture and
    /// precision in `cfg` must match the stored config; schedule fields such as
    /// `steps` may differ.
    pub fn load(path: &Path, cfg: &TrainConfig, device: &Device) -> Result<Self> {
        let (tensors, meta) = read_safetensors(path, device)?;
        let version = meta_get(&meta, "version", path)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let stored: TrainConfig = serde_json::from_str(meta_get(&meta, "config", path)?)?;
        let mismatch = [
            ("model", stored.model != cfg.model),
            ("discriminator", stored.effective_discriminator() != cfg.effective_discriminator()),
            ("decoder", stored.decoder != cfg.decoder),
            ("precision", stored.precision != cfg.precision),
            ("window", stored.window != cfg.window),
        ];
        if let Some((field, _)) = mismatch.iter().find(|(_, m)| *m) {
            return Err(Error::Incompatible(format!("`{field}` differs from the checkpoint")));
        }
        for net in NETS {
            if !tensors.keys().any(|k| k.starts_with(&format!("{net}/"))) {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("no `{net}` tensors"),
                });
            }
        }

        let reference = DitVelocityNet::init(cfg.model.clone(), 0, cfg.dtype(), device)?;
        let net = |prefix: &str| -> Result<DitVelocityNet> {
            let params = load_params(reference.params(), &section(&tensors, prefix))?;
            DitVelocityNet::from_params(cfg.model.clone(), params)
        };
        let teacher = TeacherNet::new(net("teacher")?);
        let disc_ref = MotionDiscriminator::init(cfg.effective_discriminator(), 0, cfg.dtype(), device)?;
        let disc = MotionDiscriminator::from_params(
            cfg.effective_discriminator(),
            load_params(disc_ref.params(), &section(&tensors, "disc"))?,
        )?;
        let opt = |prefix: &str, c: &crate::optim::AdamWConfig| -> Result<AdamW> {
            let steps = parse_u64(meta_get(&meta, &format!("{prefix}.steps"), path)?, path)?;
            AdamW::from_state(c.clone(), steps, &section(&tensors, prefix))
        };
        let rng_state: RngState = serde_json::from_str(meta_get(&meta, "rng", path)?)?;
        let state = Self {
            step: parse_u64(meta_get(&meta, "step", path)?, path)?,
            generator: GeneratorNet(net("generator")?),
            fake: FakeScoreNet(net("fake")?),
            teacher_hash: meta_get(&meta, "teacher_hash", path)?.to_string(),
            teacher,
            disc,
            gen_opt: opt("opt.gen", &cfg.gen_optim)?,
            fake_opt: opt("opt.fake", &cfg.fake_optim)?,
            disc_opt: opt("opt.disc", &cfg.disc_optim)?,
            rng: SeededRng::from_state(&rng_state)?,
        };
        state.verify_teacher()?;
        Ok(state)
    }
}
