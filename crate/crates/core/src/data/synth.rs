//! Procedural sprite clips with exact ground-truth flow.
//!
//! Textures are sums of low-frequency sinusoids that are periodic over the
//! frame, and sprites live on a torus, so every rendered pixel is an exact
//! sub-pixel translate of its previous position and the flow is known in
//! closed form.

use std::f64::consts::TAU;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FlowField, SeededRng, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Linear,
    Circular,
    Bounce,
}

impl FromStr for Trajectory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "circular" => Ok(Self::Circular),
            "bounce" => Ok(Self::Bounce),
            other => Err(format!("unknown trajectory `{other}` (expected linear, circular or bounce)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub radius: f64,
    /// Start position `(x, y)`; the pivot for circular motion.
    pub start: [f64; 2],
    /// Pixels per frame for linear and bounce motion.
    pub velocity: [f64; 2],
    pub trajectory: Trajectory,
    pub orbit_radius: f64,
    /// Radians per frame, positive is counter-clockwise on screen.
    pub angular_step: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprites: Vec<SpriteSpec>,
    pub background_velocity: [f64; 2],
    pub background_seed: u64,
    /// Per-frame random sprite offset amplitude in pixels.
    pub jitter: f64,
}

impl SyntheticClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::TooFewFrames {
                need: 2,
                got: self.frames,
            });
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.background_velocity) || !self.jitter.is_finite() || self.jitter < 0.0 {
            return Err(Error::config("clip.background_velocity", "must be finite"));
        }
        for s in &self.sprites {
            if !finite(&s.velocity) || !finite(&s.start) || !s.angular_step.is_finite() {
                return Err(Error::config("clip.sprites.velocity", "must be finite"));
            }
            if s.radius <= 0.0 || 2.0 * s.radius > self.height.min(self.width) as f64 {
                return Err(Error::SpriteTooLarge {
                    radius: s.radius,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        Ok(())
    }
}

/// Smooth periodic texture `base + Σ a sin(2π (kx x / W + ky y / H) + φ)`.
#[derive(Debug, Clone)]
struct Texture {
    base: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(seed: u64, base: f64, amplitude: f64) -> Self {
        let mut rng = SeededRng::new(seed);
        let n = 5;
        let mut waves = Vec::with_capacity(n);
        for _ in 0..n {
            let (kx, ky) = loop {
                let kx = rng.index(5) as f64 - 2.0;
                let ky = rng.index(5) as f64 - 2.0;
                if kx != 0.0 || ky != 0.0 {
                    break (kx, ky);
                }
            };
            let phase = rng.uniform(0.0, TAU);
            waves.push((kx, ky, phase, amplitude / n as f64));
        }
        Self { base, waves }
    }

    fn at(&self, x: f64, y: f64, w: f64, h: f64) -> f64 {
        self.waves.iter().fold(self.base, |acc, &(kx, ky, ph, a)| {
            acc + a * (TAU * (kx * x / w + ky * y / h) + ph).sin()
        })
    }
}

/// Canonical float for an 8-bit level, shared by rendering and loading.
pub fn dequantize(k: u8) -> f32 {
    k as f32 / 255.0
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let q = (p - lo).rem_euclid(2.0 * span);
    lo + if q > span { 2.0 * span - q } else { q }
}

fn wrap_delta(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

/// Sprite centre at frame `t` before jitter.
fn center(s: &SpriteSpec, t: f64, h: f64, w: f64) -> (f64, f64) {
    match s.trajectory {
        Trajectory::Linear => (s.start[0] + s.velocity[0] * t, s.start[1] + s.velocity[1] * t),
        Trajectory::Circular => {
            let a = s.angular_step * t;
            // screen y points down, so counter-clockwise subtracts the sine
            (s.start[0] + s.orbit_radius * a.cos(), s.start[1] - s.orbit_radius * a.sin())
        }
        Trajectory::Bounce => (
            reflect(s.start[0] + s.velocity[0] * t, s.radius, w - 1.0 - s.radius),
            reflect(s.start[1] + s.velocity[1] * t, s.radius, h - 1.0 - s.radius),
        ),
    }
}

/// Render a clip and its ground-truth flow; grey frames quantized to 8 bits.
pub fn generate_clip(spec: &SyntheticClipSpec, seed: u64) -> Result<(VideoTensor, FlowField)> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let bg = Texture::new(spec.background_seed, 0.4, 0.25);
    let tex: Vec<Texture> = spec
        .sprites
        .iter()
        .map(|s| Texture::new(s.texture_seed, 0.62, 0.2))
        .collect();

    let mut rng = SeededRng::derived(seed, 0x6a17);
    let centers: Vec<Vec<(f64, f64)>> = (0..t_n)
        .map(|t| {
            spec.sprites
                .iter()
                .map(|s| {
                    let (cx, cy) = center(s, t as f64, hf, wf);
                    if spec.jitter > 0.0 {
                        (
                            cx + rng.uniform(-spec.jitter, spec.jitter),
                            cy + rng.uniform(-spec.jitter, spec.jitter),
                        )
                    } else {
                        (cx, cy)
                    }
                })
                .collect()
        })
        .collect();

    let plane = h * w;
    let mut pixels = vec![0f32; t_n * 3 * plane];
    let mut flow = vec![0f32; (t_n - 1) * 2 * plane];
    let [bx, by] = spec.background_velocity;
    for t in 0..t_n {
        let tf = t as f64;
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let mut value = bg.at(xf - bx * tf, yf - by * tf, wf, hf);
                let mut top = None;
                for (k, s) in spec.sprites.iter().enumerate() {
                    let (cx, cy) = centers[t][k];
                    let dx = wrap_delta(xf - cx, wf);
                    let dy = wrap_delta(yf - cy, hf);
                    if dx * dx + dy * dy <= s.radius * s.radius {
                        value = tex[k].at(dx, dy, wf, hf);
                        top = Some(k);
                    }
                }
                let q = dequantize((value.clamp(0.0, 1.0) * 255.0).round() as u8);
                for c in 0..3 {
                    pixels[(t * 3 + c) * plane + y * w + x] = q;
                }
                if t + 1 < t_n {
                    let (u, v) = match top {
                        Some(k) => {
                            let (x0, y0) = centers[t][k];
                            let (x1, y1) = centers[t + 1][k];
                            (wrap_delta(x1 - x0, wf), wrap_delta(y1 - y0, hf))
                        }
                        None => (bx, by),
                    };
                    flow[(t * 2) * plane + y * w + x] = u as f32;
                    flow[(t * 2 + 1) * plane + y * w + x] = v as f32;
                }
            }
        }
    }
    let dev = Device::Cpu;
    let video = VideoTensor::from_clip(Tensor::from_vec(pixels, (t_n, 3, h, w), &dev)?)?;
    let flow = FlowField::from_clip(Tensor::from_vec(flow, (t_n - 1, 2, h, w), &dev)?)?;
    Ok((video, flow))
}

/// Known-bad motion patterns used as fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Degradation {
    /// Every frame replaced by frame 0.
    Static,
    /// Whole-frame integer offsets drawn per frame in `[-amplitude, amplitude]`.
    Jitter { amplitude: usize, seed: u64 },
    /// Average of the clip with itself delayed by `lag` frames.
    Ghost { lag: usize },
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "jitter" => Ok(Self::Jitter {
                amplitude: 3,
                seed: 0,
            }),
            "ghost" => Ok(Self::Ghost { lag: 2 }),
            other => Err(Error::UnknownDegradation(other.to_string())),
        }
    }
}

/// Apply a degradation to every clip in the batch.
pub fn make_degraded(clip: &VideoTensor, mode: Degradation) -> Result<VideoTensor> {
    let x = clip.tensor();
    let t = clip.frames();
    let frames: Vec<Tensor> = match mode {
        Degradation::Static => {
            let f0 = x.narrow(1, 0, 1)?;
            vec![f0; t]
        }
        Degradation::Jitter { amplitude, seed } => {
            let mut rng = SeededRng::derived(seed, 0x717e);
            let span = 2 * amplitude + 1;
            (0..t)
                .map(|i| {
                    let dx = rng.index(span) as i64 - amplitude as i64;
                    let dy = rng.index(span) as i64 - amplitude as i64;
                    roll2(&x.narrow(1, i, 1)?, dy, dx)
                })
                .collect::<Result<_>>()?
        }
        Degradation::Ghost { lag } => (0..t)
            .map(|i| {
                let a = x.narrow(1, i, 1)?;
                let b = x.narrow(1, i.saturating_sub(lag), 1)?;
                Ok(((a + b)? * 0.5)?)
            })
            .collect::<Result<_>>()?,
    };
    VideoTensor::new(Tensor::cat(&frames, 1)?)
}

/// Periodic shift of the last two axes by `(dy, dx)`.
fn roll2(x: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let r = x.rank();
    let roll = |x: Tensor, dim: usize, s: i64| -> Result<Tensor> {
        let n = x.dims()[dim] as i64;
        let s = s.rem_euclid(n) as usize;
        if s == 0 {
            return Ok(x);
        }
        let n = n as usize;
        let tail = x.narrow(dim, n - s, s)?;
        let head = x.narrow(dim, 0, n - s)?;
        Ok(Tensor::cat(&[tail, head], dim)?)
    };
    let y = roll(x.clone(), r - 2, dy)?;
    roll(y, r - 1, dx)
}
