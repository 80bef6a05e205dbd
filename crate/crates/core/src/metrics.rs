//! Motion metrics: smoothness, dynamics degree and their mean, the motion score.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{Prompt, PromptSet};
use crate::error::{Error, Result};
use crate::flow::{crop, interior_mean_magnitude, FlowEstimator};
use crate::tensor::VideoTensor;

/// Sampling seeds shared by every compared model.
pub const EVAL_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Flow magnitude (pixels per frame) above which a frame pair counts as moving.
    pub tau: f64,
    /// Fraction of each border ignored by flow statistics.
    pub margin: f64,
    /// Interpolation error mapped to zero smoothness.
    pub calibration: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            margin: 0.1,
            calibration: 1.0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.calibration > 0.0 && (0.0..0.5).contains(&self.margin)) {
            return Err(Error::config("metrics", "need tau >= 0, calibration > 0, margin in [0, 0.5)"));
        }
        Ok(())
    }
}

fn to_vec(t: &candle_core::Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Bilinear sample with clamp-to-edge addressing.
fn sample(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Per-clip smoothness in `[0, 1]`.
///
/// Each inner frame is predicted from its neighbours warped along the
/// estimated motion, `x̂_t(p) = ½ [x_{t-1}(p - m) + x_{t+1}(p + m)]` with
/// `m = ½ (o_{t-1} + o_t)`; the mean absolute prediction error over the interior
/// is the second-order temporal residual after motion compensation, which is
/// zero for constant-velocity motion and for still clips.
pub fn smoothness_per_clip(
    video: &VideoTensor,
    estimator: &dyn FlowEstimator,
    cfg: &MetricsConfig,
) -> Result<Vec<f64>> {
    let (b, t, c, h, w) = video.tensor().dims5()?;
    if t < 3 {
        return Err(Error::TooFewFrames { need: 3, got: t });
    }
    let flow = to_vec(estimator.estimate(&video.detach())?.tensor())?;
    let pix = to_vec(video.tensor())?;
    let plane = h * w;
    let (y0, y1) = crop(h, cfg.margin);
    let (x0, x1) = crop(w, cfg.margin);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let frame = |ti: usize, ci: usize| {
            let s = ((bi * t + ti) * c + ci) * plane;
            &pix[s..s + plane]
        };
        let flow_at = |pi: usize, ch: usize, idx: usize| flow[((bi * (t - 1) + pi) * 2 + ch) * plane + idx];
        let mut err = 0.0;
        let mut n = 0usize;
        for ti in 1..t - 1 {
            for ci in 0..c {
                let (prev, cur, next) = (frame(ti - 1, ci), frame(ti, ci), frame(ti + 1, ci));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = y * w + x;
                        let mx = 0.5 * (flow_at(ti - 1, 0, idx) + flow_at(ti, 0, idx));
                        let my = 0.5 * (flow_at(ti - 1, 1, idx) + flow_at(ti, 1, idx));
                        let (yf, xf) = (y as f64, x as f64);
                        let pred = 0.5
                            * (sample(prev, h, w, yf - my, xf - mx) + sample(next, h, w, yf + my, xf + mx));
                        err += (pred - cur[idx]).abs();
                        n += 1;
                    }
                }
            }
        }
        let err = err / n as f64;
        out.push(1.0 - (err / cfg.calibration).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Batch-mean smoothness.
pub fn smoothness(video: &VideoTensor, estimator: &dyn FlowEstimator, cfg: &MetricsConfig) -> Result<f64> {
    Ok(mean(&smoothness_per_clip(video, estimator, cfg)?))
}

/// Per-clip fraction of frame pairs whose mean interior flow magnitude exceeds `tau`.
pub fn dynamics_per_clip(
    video: &VideoTensor,
    estimator: &dyn FlowEstimator,
    cfg: &MetricsConfig,
) -> Result<Vec<f64>> {
    let flow = estimator.estimate(&video.detach())?;
    Ok(interior_mean_magnitude(&flow, cfg.margin)?
        .into_iter()
        .map(|pairs| pairs.iter().filter(|&&m| m > cfg.tau).count() as f64 / pairs.len() as f64)
        .collect())
}

/// Batch-mean dynamics degree.
pub fn dynamics_degree(video: &VideoTensor, estimator: &dyn FlowEstimator, cfg: &MetricsConfig) -> Result<f64> {
    Ok(mean(&dynamics_per_clip(video, estimator, cfg)?))
}

pub fn motion_score(smoothness: f64, dynamics: f64) -> f64 {
    0.5 * (smoothness + dynamics)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub smoothness: f64,
    pub dynamics: f64,
    pub motion_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub smoothness: f64,
    pub dynamics: f64,
    pub motion_score: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<SeedMetrics>,
}

impl MotionReport {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>) -> Self {
        let s = mean(&per_seed.iter().map(|m| m.smoothness).collect::<Vec<_>>());
        let d = mean(&per_seed.iter().map(|m| m.dynamics).collect::<Vec<_>>());
        Self {
            smoothness: s,
            dynamics: d,
            motion_score: motion_score(s, d),
            n_seeds: per_seed.len(),
            per_seed,
        }
    }
}

/// Anything that can produce a clip for a prompt and seed.
pub trait ClipSource {
    /// Clips for every prompt, batched as `[P, T, C, H, W]`, drawn with `seed`.
    fn sample(&self, prompts: &[Prompt], seed: u64) -> Result<VideoTensor>;
}

/// Evaluate a clip source on a prompt set with a fixed seed list.
pub fn evaluate_model(
    source: &dyn ClipSource,
    prompts: &PromptSet,
    seeds: &[u64],
    estimator: &dyn FlowEstimator,
    cfg: &MetricsConfig,
) -> Result<MotionReport> {
    if prompts.is_empty() {
        return Err(Error::config("prompts", "prompt set is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::config("eval.seeds", "need at least one seed"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let video = source.sample(prompts.prompts(), seed)?;
        let s = smoothness(&video, estimator, cfg)?;
        let d = dynamics_degree(&video, estimator, cfg)?;
        per_seed.push(SeedMetrics {
            seed,
            smoothness: s,
            dynamics: d,
            motion_score: motion_score(s, d),
        });
    }
    Ok(MotionReport::from_seeds(per_seed))
}

/// Named reports rendered as an aligned plain-text table.
pub fn format_table(rows: &[(String, MotionReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$}  {:>10}  {:>8}  {:>12}  {:>7}",
        "model", "smoothness", "dynamics", "motion_score", "n_seeds"
    );
    let _ = writeln!(s, "{}", "-".repeat(name_w + 45));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>10.4}  {:>8.4}  {:>12.4}  {:>7}",
            name, r.smoothness, r.dynamics, r.motion_score, r.n_seeds
        );
    }
    s
}

/// Write `<stem>.json` and `<stem>.txt` for a comparison.
pub fn write_table(dir: &Path, stem: &str, rows: &[(String, MotionReport)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(n, r)| serde_json::json!({ "model": n, "report": r }))
        .collect();
    let jp = dir.join(format!("{stem}.json"));
    std::fs::write(&jp, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&jp, e))?;
    let tp = dir.join(format!("{stem}.txt"));
    std::fs::write(&tp, format_table(rows)).map_err(|e| Error::io(&tp, e))
}

/// Metric-versus-step curves as CSV plus a minimal SVG line chart.
pub fn write_curves(dir: &Path, stem: &str, steps: &[u64], series: &[(&str, Vec<f64>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("step");
    for (name, _) in series {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (i, step) in steps.iter().enumerate() {
        csv.push_str(&step.to_string());
        for (_, v) in series {
            let _ = write!(csv, ",{}", v.get(i).copied().unwrap_or(f64::NAN));
        }
        csv.push('\n');
    }
    let cp = dir.join(format!("{stem}.csv"));
    std::fs::write(&cp, csv).map_err(|e| Error::io(&cp, e))?;

    let (wd, ht, pad) = (640.0, 360.0, 40.0);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|x| x.is_finite()).collect();
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let smax = steps.iter().copied().max().unwrap_or(1).max(1) as f64;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{wd}\" height=\"{ht}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (k, (name, v)) in series.iter().enumerate() {
        let pts: Vec<String> = steps
            .iter()
            .zip(v)
            .filter(|(_, y)| y.is_finite())
            .map(|(&s, &y)| {
                let px = pad + (wd - 2.0 * pad) * s as f64 / smax;
                let py = ht - pad - (ht - 2.0 * pad) * (y - lo) / (hi - lo);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let color = colors[k % colors.len()];
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>",
            pts.join(" "),
            pad + 4.0,
            pad + 14.0 * (k as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    let sp = dir.join(format!("{stem}.svg"));
    std::fs::write(&sp, svg).map_err(|e| Error::io(&sp, e))
}
