mod common;

use candle_core::Tensor;
use mogan_core::data::{
    generate_dataset, make_degraded, plan_dataset, regenerate, Dataset, DatasetConfig, Degradation, Prompt,
    PromptSet, Split, Trajectory,
};
use mogan_core::flow::{FlowEstimator, HornSchunck};
use mogan_core::metrics::{
    dynamics_degree, evaluate_model, smoothness, ClipSource, MetricsConfig, EVAL_SEEDS,
};
use mogan_core::VideoTensor;

use common::{background_clip, sprite_clip, values};

fn frame_difference_energy(v: &VideoTensor) -> f64 {
    let t = v.frames();
    let a = v.tensor().narrow(1, 1, t - 1).unwrap();
    let b = v.tensor().narrow(1, 0, t - 1).unwrap();
    (a - b).unwrap().sqr().unwrap().mean_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_scalar().unwrap()
}

#[test]
fn jitter_fixture_multiplies_frame_energy() {
    let (clean, _) = sprite_clip(Trajectory::Linear, [1.0, 0.0], 12, 5);
    let jittered = make_degraded(&clean, Degradation::Jitter { amplitude: 3, seed: 1 }).unwrap();
    let (e0, e1) = (frame_difference_energy(&clean), frame_difference_energy(&jittered));
    assert!(e1 >= 5.0 * e0, "clean {e0:.2e}, jittered {e1:.2e}");
}

/// Best two-cluster split of sorted samples and Ashman's D for it.
fn two_clusters(mut u: Vec<f64>) -> (f64, f64, f64, f64) {
    u.sort_by(|a, b| a.total_cmp(b));
    let n = u.len();
    let (mut s, mut s2) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    for i in 0..n {
        s[i + 1] = s[i] + u[i];
        s2[i + 1] = s2[i] + u[i] * u[i];
    }
    let ss = |a: usize, b: usize| s2[b] - s2[a] - (s[b] - s[a]).powi(2) / (b - a) as f64;
    let k = (1..n).min_by(|&a, &b| (ss(0, a) + ss(a, n)).total_cmp(&(ss(0, b) + ss(b, n)))).unwrap();
    let (m1, m2) = (s[k] / k as f64, (s[n] - s[k]) / (n - k) as f64);
    let (v1, v2) = (ss(0, k) / k as f64, ss(k, n) / (n - k) as f64);
    let d = 2f64.sqrt() * (m2 - m1).abs() / (v1 + v2).sqrt();
    (d, m1, m2, (n - k).min(k) as f64 / n as f64)
}

#[test]
fn ghost_fixture_flow_is_bimodal() {
    let (clean, _) = sprite_clip(Trajectory::Linear, [1.0, 0.0], 10, 3);
    let ghost = make_degraded(&clean, Degradation::Ghost { lag: 2 }).unwrap();
    let f = values(HornSchunck::default().estimate(&ghost).unwrap().tensor());
    let plane = 32 * 32;
    let mut u = Vec::new();
    // Pairs once both copies are on screen, interior pixels only.
    for p in 3..9 {
        for y in 3..29 {
            for x in 3..29 {
                u.push(f[p * 2 * plane + y * 32 + x]);
            }
        }
    }
    let (d, still, moving, minor) = two_clusters(u);
    assert!(d > 2.0, "Ashman D {d:.2}");
    assert!(still.abs() < 0.25 && moving > 0.5, "centroids {still:.2}, {moving:.2}");
    assert!(minor > 0.05, "minor cluster holds {minor:.3}");
}

#[test]
fn static_fixture_has_no_flow() {
    let (clip, _) = background_clip([1.0, 0.5], 6, 2);
    let still = make_degraded(&clip, Degradation::Static).unwrap();
    let hs = HornSchunck::default();
    let peak = values(hs.estimate(&still).unwrap().tensor()).into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 0.05, "{peak}");
    let cfg = MetricsConfig::default();
    assert_eq!(dynamics_degree(&still, &hs, &cfg).unwrap(), 0.0);
    assert_eq!(smoothness(&still, &hs, &cfg).unwrap(), 1.0);
}

#[test]
fn steady_translation_is_fully_dynamic_and_smooth() {
    let (clip, _) = background_clip([2.0, 0.0], 16, 4);
    let hs = HornSchunck::default();
    let cfg = MetricsConfig::default();
    assert_eq!(dynamics_degree(&clip, &hs, &cfg).unwrap(), 1.0);
    let (slow, _) = background_clip([1.0, 0.0], 16, 4);
    let s = smoothness(&slow, &hs, &cfg).unwrap();
    assert!(s >= 0.99, "{s}");
}

#[test]
fn jitter_lowers_smoothness() {
    let hs = HornSchunck::default();
    let cfg = MetricsConfig::default();
    for seed in 0..3 {
        let (clean, _) = sprite_clip(Trajectory::Linear, [1.5, 0.5], 12, seed);
        let jittered = make_degraded(&clean, Degradation::Jitter { amplitude: 3, seed }).unwrap();
        let (a, b) = (smoothness(&clean, &hs, &cfg).unwrap(), smoothness(&jittered, &hs, &cfg).unwrap());
        assert!(b < a, "seed {seed}: clean {a}, jittered {b}");
    }
}

#[test]
fn half_still_clip_scores_half() {
    let (clip, _) = background_clip([2.0, 1.0], 16, 6);
    let first = clip.tensor().narrow(1, 0, 1).unwrap();
    let mut frames = vec![first; 8];
    frames.push(clip.tensor().narrow(1, 8, 8).unwrap());
    let half = VideoTensor::new(Tensor::cat(&frames, 1).unwrap()).unwrap();
    let d = dynamics_degree(&half, &HornSchunck::default(), &MetricsConfig::default()).unwrap();
    assert!((d - 0.5).abs() <= 0.1, "{d}");
}

/// Returns real eval clips of each prompt's class, the best a generator can do.
struct Oracle<'a>(&'a Dataset);

impl ClipSource for Oracle<'_> {
    fn sample(&self, prompts: &[Prompt], seed: u64) -> mogan_core::Result<VideoTensor> {
        let clips: Vec<VideoTensor> = prompts
            .iter()
            .map(|p| {
                let pool: Vec<_> = self.0.split(Split::Eval).filter(|c| c.record.class == p.class).collect();
                pool[(seed as usize + p.id as usize) % pool.len()].video.clone()
            })
            .collect();
        VideoTensor::stack(&clips)
    }
}

#[test]
fn oracle_source_is_dynamic_and_repeatable() {
    let cfg = DatasetConfig {
        train_clips: 8,
        eval_clips: 32,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let hs = HornSchunck::default();
    let m = MetricsConfig::default();
    let a = evaluate_model(&Oracle(&ds), &ds.prompts.eval, &EVAL_SEEDS, &hs, &m).unwrap();
    let b = evaluate_model(&Oracle(&ds), &ds.prompts.eval, &EVAL_SEEDS, &hs, &m).unwrap();
    assert_eq!(a, b);
    assert!(a.dynamics >= 0.9, "{}", a.dynamics);
    assert_eq!(a.n_seeds, EVAL_SEEDS.len());
    assert!(evaluate_model(&Oracle(&ds), &ds.prompts.eval, &[], &hs, &m).is_err());
    assert!(PromptSet::new(vec![]).is_err());
}

#[test]
fn regeneration_is_bit_identical() {
    let cfg = DatasetConfig {
        train_clips: 6,
        eval_clips: 6,
        seed: 7,
        ..DatasetConfig::default()
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = regenerate(&plan_dataset(&cfg).unwrap()).unwrap();
    assert_eq!(a.clips.len(), b.len());
    for (x, y) in a.clips.iter().zip(&b) {
        assert_eq!(x.record, y.record);
        assert_eq!(values(x.video.tensor()), values(y.video.tensor()));
        assert_eq!(values(x.flow.tensor()), values(y.flow.tensor()));
    }
}
