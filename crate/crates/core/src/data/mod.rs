//! Synthetic motion corpus, prompt sets and on-disk layout.
//!
//! Layout under a data root:
//! `manifest.jsonl`, `prompts.json` and `{train,eval}/clip_<id>/clip.safetensors`.

mod synth;

pub use synth::{
    dequantize, generate_clip, make_degraded, Degradation, SpriteSpec, SyntheticClipSpec, Trajectory,
};

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_safetensors, write_safetensors};
use crate::error::{Error, Result};
use crate::tensor::{mix_seed, FlowField, SeededRng, VideoTensor};

/// First eval prompt id; train prompt ids stay below it.
pub const EVAL_PROMPT_BASE: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One condition class: a trajectory family and its preferred direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    /// `linear`, `circular` or `bounce`.
    pub trajectory: String,
    /// Unit direction for linear and bounce motion; for circular motion the
    /// sign of the x component picks counter-clockwise (positive) or clockwise.
    pub direction: [f64; 2],
}

impl ClassSpec {
    fn new(label: &str, trajectory: &str, direction: [f64; 2]) -> Self {
        Self {
            label: label.to_string(),
            trajectory: trajectory.to_string(),
            direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    /// Sprite speed range in pixels per frame.
    pub speed: [f64; 2],
    pub background_speed: [f64; 2],
    pub sprite_radius: [f64; 2],
    pub max_sprites: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            train_clips: 2000,
            eval_clips: 200,
            frames: 16,
            height: 32,
            width: 32,
            seed: 0,
            classes: vec![
                ClassSpec::new("drift right", "linear", [1.0, 0.0]),
                ClassSpec::new("drift left", "linear", [-1.0, 0.0]),
                ClassSpec::new("fall down", "linear", [0.0, 1.0]),
                ClassSpec::new("rise up", "linear", [0.0, -1.0]),
                ClassSpec::new("diagonal glide", "linear", [d, d]),
                ClassSpec::new("orbit counter-clockwise", "circular", [1.0, 0.0]),
                ClassSpec::new("orbit clockwise", "circular", [-1.0, 0.0]),
                ClassSpec::new("bounce", "bounce", [0.8, 0.6]),
            ],
            speed: [1.5, 2.5],
            background_speed: [0.75, 1.25],
            sprite_radius: [6.0, 8.0],
            max_sprites: 2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("data.classes", "need at least one class"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.trajectory
                .parse::<Trajectory>()
                .map_err(|e| Error::config(format!("data.classes[{i}].trajectory"), e))?;
        }
        if self.frames < 3 {
            return Err(Error::config("data.frames", "need at least 3 frames"));
        }
        if self.max_sprites == 0 {
            return Err(Error::config("data.max_sprites", "must be >= 1"));
        }
        let range = |name: &str, r: [f64; 2]| {
            if r[0] <= r[1] && r[0] >= 0.0 && r[1].is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("data.{name}"), "expected 0 <= lo <= hi"))
            }
        };
        range("speed", self.speed)?;
        range("background_speed", self.background_speed)?;
        range("sprite_radius", self.sprite_radius)?;
        if 2.0 * self.sprite_radius[1] > self.height.min(self.width) as f64 {
            return Err(Error::config("data.sprite_radius", "sprite larger than the frame"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Clip spec for a given class drawn from `seed`.
    pub fn sample_spec(&self, class: usize, seed: u64) -> Result<SyntheticClipSpec> {
        let c = &self.classes[class];
        let traj: Trajectory = c
            .trajectory
            .parse()
            .map_err(|e| Error::config(format!("data.classes[{class}].trajectory"), e))?;
        let mut rng = SeededRng::new(seed);
        let (hf, wf) = (self.height as f64, self.width as f64);
        let n = 1 + rng.index(self.max_sprites);
        let mut sprites = Vec::with_capacity(n);
        for _ in 0..n {
            let radius = rng.uniform(self.sprite_radius[0], self.sprite_radius[1]);
            let speed = rng.uniform(self.speed[0], self.speed[1]);
            let [dx, dy] = c.direction;
            let sprite = match traj {
                Trajectory::Circular => {
                    let orbit = rng.uniform(6.0, 9.0);
                    let sign = if dx >= 0.0 { 1.0 } else { -1.0 };
                    SpriteSpec {
                        radius,
                        start: [wf / 2.0 + rng.uniform(-3.0, 3.0), hf / 2.0 + rng.uniform(-3.0, 3.0)],
                        velocity: [0.0, 0.0],
                        trajectory: traj,
                        orbit_radius: orbit,
                        angular_step: sign * speed / orbit,
                        texture_seed: rng.next_u64(),
                    }
                }
                _ => SpriteSpec {
                    radius,
                    start: [
                        rng.uniform(radius, wf - 1.0 - radius),
                        rng.uniform(radius, hf - 1.0 - radius),
                    ],
                    velocity: [dx * speed, dy * speed],
                    trajectory: traj,
                    orbit_radius: 0.0,
                    angular_step: 0.0,
                    texture_seed: rng.next_u64(),
                },
            };
            sprites.push(sprite);
        }
        let angle = rng.uniform(0.0, TAU);
        let bs = rng.uniform(self.background_speed[0], self.background_speed[1]);
        Ok(SyntheticClipSpec {
            frames: self.frames,
            height: self.height,
            width: self.width,
            sprites,
            background_velocity: [bs * angle.cos(), bs * angle.sin()],
            background_seed: rng.next_u64(),
            jitter: 0.0,
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    pub class: u32,
    pub label: String,
    pub seed: u64,
    pub spec: SyntheticClipSpec,
}

impl ManifestRecord {
    pub fn dir_name(&self) -> String {
        format!("clip_{:05}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u32,
    pub class: u32,
    pub label: String,
}

/// Non-empty list of condition prompts with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Prompt>", into = "Vec<Prompt>")]
pub struct PromptSet(Vec<Prompt>);

impl TryFrom<Vec<Prompt>> for PromptSet {
    type Error = Error;

    fn try_from(v: Vec<Prompt>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PromptSet> for Vec<Prompt> {
    fn from(p: PromptSet) -> Self {
        p.0
    }
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::config("prompts", "prompt set is empty"));
        }
        let mut seen = BTreeSet::new();
        for p in &prompts {
            if !seen.insert(p.id) {
                return Err(Error::config("prompts", format!("duplicate prompt id {}", p.id)));
            }
        }
        Ok(Self(prompts))
    }

    /// `n` prompts cycling through the classes; eval ids start at [`EVAL_PROMPT_BASE`].
    pub fn for_classes(classes: &[ClassSpec], split: Split, n: usize) -> Result<Self> {
        let base = match split {
            Split::Train => 0,
            Split::Eval => EVAL_PROMPT_BASE,
        };
        let prompts = (0..n)
            .map(|j| {
                let class = j % classes.len();
                Prompt {
                    id: base + j as u32,
                    class: class as u32,
                    label: format!("{} #{}", classes[class].label, j / classes.len()),
                }
            })
            .collect();
        Self::new(prompts)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.0.iter().map(|p| p.id).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Prompt sets persisted next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    pub train: PromptSet,
    pub eval: PromptSet,
}

/// A rendered clip in memory: `[1, T, 3, H, W]` video and its exact flow.
#[derive(Debug, Clone)]
pub struct Clip {
    pub record: ManifestRecord,
    pub video: VideoTensor,
    pub flow: FlowField,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub clips: Vec<Clip>,
    pub prompts: PromptFile,
}

fn render(records: Vec<ManifestRecord>) -> Result<Vec<Clip>> {
    records
        .into_iter()
        .map(|record| {
            let (video, flow) = generate_clip(&record.spec, record.seed)?;
            Ok(Clip { record, video, flow })
        })
        .collect()
}

/// Manifest records for a config; clip ids are unique across splits.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let total = cfg.train_clips + cfg.eval_clips;
    (0..total)
        .map(|i| {
            let id = i as u64;
            let split = if i < cfg.train_clips { Split::Train } else { Split::Eval };
            let class = i % cfg.num_classes();
            let seed = mix_seed(cfg.seed, id);
            Ok(ManifestRecord {
                id,
                split,
                class: class as u32,
                label: cfg.classes[class].label.clone(),
                seed,
                spec: cfg.sample_spec(class, seed)?,
            })
        })
        .collect()
}

/// Render a whole corpus in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let clips = render(plan_dataset(cfg)?)?;
    let n = cfg.num_classes();
    Ok(Dataset {
        config: cfg.clone(),
        clips,
        prompts: PromptFile {
            train: PromptSet::for_classes(&cfg.classes, Split::Train, 4 * n)?,
            eval: PromptSet::for_classes(&cfg.classes, Split::Eval, n)?,
        },
    })
}

/// Re-render clips from manifest records; bit-identical to the original run.
pub fn regenerate(records: &[ManifestRecord]) -> Result<Vec<Clip>> {
    render(records.to_vec())
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.record.split == split)
    }

    /// Stack the videos of a split as `[N, T, 3, H, W]` in `dtype`.
    pub fn videos(&self, split: Split, dtype: DType) -> Result<(VideoTensor, Vec<u32>)> {
        let clips: Vec<&Clip> = self.split(split).collect();
        if clips.is_empty() {
            return Err(Error::config(
                format!("data.{}_clips", split.as_str()),
                "split has no clips",
            ));
        }
        let ts: Vec<Tensor> = clips
            .iter()
            .map(|c| c.video.tensor().to_dtype(dtype))
            .collect::<std::result::Result<_, _>>()?;
        let classes = clips.iter().map(|c| c.record.class).collect();
        Ok((VideoTensor::new(Tensor::cat(&ts, 0)?)?, classes))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let manifest = root.join("manifest.jsonl");
        let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        for clip in &self.clips {
            let line = serde_json::to_string(&clip.record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&manifest, e))?;
            let dir = clip_dir(root, &clip.record);
            let mut tensors = std::collections::BTreeMap::new();
            let pixels = (clip.video.tensor().squeeze(0)? * 255.0)?.round()?.to_dtype(DType::U8)?;
            tensors.insert("video".to_string(), pixels);
            tensors.insert("flow".to_string(), clip.flow.tensor().squeeze(0)?);
            let mut meta = HashMap::new();
            meta.insert("record".to_string(), serde_json::to_string(&clip.record)?);
            write_safetensors(&dir.join("clip.safetensors"), &tensors, meta)?;
        }
        let prompts = root.join("prompts.json");
        std::fs::write(&prompts, serde_json::to_string_pretty(&self.prompts)?)
            .map_err(|e| Error::io(&prompts, e))?;
        let cfg = root.join("dataset.json");
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let cfg_path = root.join("dataset.json");
        if !cfg_path.exists() {
            return Err(Error::config(
                "data.root",
                format!("no dataset at {}", root.display()),
            ));
        }
        let config: DatasetConfig =
            serde_json::from_str(&std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?)?;
        let records = read_manifest(&root.join("manifest.jsonl"))?;
        let mut clips = Vec::with_capacity(records.len());
        for record in records {
            let path = clip_dir(root, &record).join("clip.safetensors");
            let (t, _) = read_safetensors(&path, &Device::Cpu)?;
            let get = |k: &str| {
                t.get(k).cloned().ok_or_else(|| Error::Checkpoint {
                    path: path.clone(),
                    reason: format!("missing `{k}`"),
                })
            };
            let raw = get("video")?;
            let levels: Vec<f32> = raw.flatten_all()?.to_vec1::<u8>()?.into_iter().map(dequantize).collect();
            let video = Tensor::from_vec(levels, raw.dims(), &Device::Cpu)?;
            clips.push(Clip {
                record,
                video: VideoTensor::from_clip(video)?,
                flow: FlowField::from_clip(get("flow")?)?,
            });
        }
        let prompts_path = root.join("prompts.json");
        let prompts = serde_json::from_str(
            &std::fs::read_to_string(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?,
        )?;
        Ok(Self {
            config,
            clips,
            prompts,
        })
    }
}

pub fn clip_dir(root: &Path, record: &ManifestRecord) -> PathBuf {
    root.join(record.split.as_str()).join(record.dir_name())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train_clips: 10,
            eval_clips: 4,
            frames: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn splits_and_prompt_ids_are_disjoint() {
        let ds = generate_dataset(&small()).unwrap();
        let train: BTreeSet<u64> = ds.split(Split::Train).map(|c| c.record.id).collect();
        let eval: BTreeSet<u64> = ds.split(Split::Eval).map(|c| c.record.id).collect();
        assert_eq!((train.len(), eval.len()), (10, 4));
        assert!(train.is_disjoint(&eval));
        assert!(ds.prompts.train.ids().is_disjoint(&ds.prompts.eval.ids()));
    }

    #[test]
    fn bad_trajectory_names_the_field() {
        let mut cfg = small();
        cfg.classes[2].trajectory = "spiral".into();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.classes[2].trajectory"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prompt_set_rules() {
        assert!(PromptSet::new(vec![]).is_err());
        let p = Prompt {
            id: 1,
            class: 0,
            label: "a".into(),
        };
        assert!(PromptSet::new(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn disk_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small()).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.clips.len(), ds.clips.len());
        let a: Vec<f32> = ds.clips[3].video.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.clips[3].video.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let records = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let again = regenerate(&records).unwrap();
        let c: Vec<f32> = again[3].video.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }
}
