use std::path::{Path, PathBuf};

use log::{info, warn};

use mogan_core::data::{generate_dataset, Dataset, PromptSet, Split};
use mogan_core::flow::{write_flow_pngs, FlowEstimator};
use mogan_core::metrics::{evaluate_model, format_table, write_curves, write_table, ClipSource, MotionReport, SeedMetrics};
use mogan_core::trainer::{
    load_teacher, pretrain_teacher, save_teacher, Ablation, CheckpointInfo, GeneratorSource, RunDir, StepMetrics,
    TrainData, TrainState, Trainer,
};
use mogan_core::Device;

use crate::config::{io_failure, runs_root, RunConfig, RunManifest};
use crate::Failure;

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn datagen(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.data.seed = seed;
    }
    cfg.data.validate()?;
    if is_nonempty_dir(out) && !force {
        return Err(Failure::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let ds = generate_dataset(&cfg.data)?;
    ds.write(out)?;
    println!("wrote {} clips to {}", ds.clips.len(), out.display());
    for split in [Split::Train, Split::Eval] {
        let n = ds.split(split).count();
        println!("  {:<5} {n} clips", split.as_str());
    }
    for (i, class) in ds.config.classes.iter().enumerate() {
        let n = ds.clips.iter().filter(|c| c.record.class as usize == i).count();
        println!("  class {i} {:<24} {n}", class.label);
    }
    println!(
        "  prompts: {} train, {} eval",
        ds.prompts.train.len(),
        ds.prompts.eval.len()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, data: &Path) -> Result<(Dataset, TrainData), Failure> {
    let ds = Dataset::read(data)?;
    let decoder = Trainer::build_decoder(&cfg.train, &Device::Cpu)?;
    let td = TrainData::from_dataset(&ds, &decoder, &cfg.train)?;
    Ok((ds, td))
}

pub fn pretrain(config: Option<&Path>, data: &Path, name: &str) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let (_, td) = load_data(&cfg, data)?;
    let run = RunDir::create(runs_root().join(name))?;
    let teacher = pretrain_teacher(&cfg.train, &td, |step, loss| {
        if step % 100 == 0 {
            info!("pretrain step {step}: loss {loss:.5}");
        }
    })?;
    save_teacher(&run.teacher_path(), &teacher)?;
    println!("teacher written to {}", run.teacher_path().display());
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub name: String,
    pub ablation: Option<String>,
    pub resume: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub teacher: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(steps) = args.steps {
        t.steps = steps;
        if t.warmup_steps > steps {
            warn!("warm-up shortened from {} to {steps} steps", t.warmup_steps);
            t.warmup_steps = steps;
        }
    }
    if let Some(list) = &args.ablation {
        let extra: Ablation = list.parse()?;
        t.ablation.no_dmd |= extra.no_dmd;
        t.ablation.no_r1r2 |= extra.no_r1r2;
        t.ablation.video_disc |= extra.video_disc;
    }
    cfg.validate()?;

    let (_, td) = load_data(&cfg, &args.data)?;
    let run = RunDir::create(runs_root().join(&args.name))?;
    let trainer = Trainer::new(cfg.train.clone(), td)?;
    let mut state = match &args.resume {
        Some(ckpt) => {
            let state = TrainState::load(ckpt, &cfg.train, &Device::Cpu)?;
            run.truncate_metrics(state.step)?;
            info!("resuming from {} at step {}", ckpt.display(), state.step);
            state
        }
        None => {
            RunManifest::new(&args.name, &args.data, &cfg, &run).write(&run)?;
            let teacher_path = args.teacher.clone().unwrap_or_else(|| run.teacher_path());
            let teacher = if teacher_path.exists() {
                load_teacher(&teacher_path, &cfg.train, &Device::Cpu)?
            } else if args.teacher.is_some() {
                return Err(Failure::Config(format!("no teacher at {}", teacher_path.display())));
            } else {
                info!("no teacher found; pretraining for {} steps", cfg.train.pretrain.steps);
                let teacher = pretrain_teacher(&cfg.train, trainer.data(), |_, _| {})?;
                save_teacher(&run.teacher_path(), &teacher)?;
                teacher
            };
            trainer.init_state(teacher)?
        }
    };
    let history = trainer.run_in(&mut state, cfg.train.steps, &run)?;
    info!("flow estimator calls: {}", trainer.flow_invocations());
    if let Some(last) = history.last() {
        println!("{}", serde_json::to_string(last).map_err(|e| Failure::Runtime(e.to_string()))?);
    }
    println!(
        "run {} finished at step {} ({} new records)",
        run.root().display(),
        state.step,
        history.len()
    );
    Ok(())
}

pub struct EvalArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    pub data: PathBuf,
    pub prompts: String,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub flow_png: bool,
}

fn label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn delta(a: &MotionReport, b: &MotionReport) -> MotionReport {
    let per_seed = a
        .per_seed
        .iter()
        .zip(&b.per_seed)
        .map(|(x, y)| SeedMetrics {
            seed: x.seed,
            smoothness: y.smoothness - x.smoothness,
            dynamics: y.dynamics - x.dynamics,
            motion_score: y.motion_score - x.motion_score,
        })
        .collect();
    MotionReport {
        smoothness: b.smoothness - a.smoothness,
        dynamics: b.dynamics - a.dynamics,
        motion_score: b.motion_score - a.motion_score,
        n_seeds: a.n_seeds,
        per_seed,
    }
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    cfg.validate()?;
    let ia = CheckpointInfo::read(&args.a)?;
    let ib = CheckpointInfo::read(&args.b)?;
    let (ca, cb) = (&ia.config, &ib.config);
    let clash = if ca.decoder != cb.decoder {
        Some("decoder")
    } else if ca.window.chunks != cb.window.chunks {
        Some("window.chunks")
    } else if ca.model.num_classes != cb.model.num_classes {
        Some("model.num_classes")
    } else {
        None
    };
    if let Some(field) = clash {
        return Err(Failure::Runtime(format!(
            "incompatible checkpoints: {} (version {}, step {}) and {} (version {}, step {}) differ in `{field}`",
            args.a.display(),
            ia.version,
            ia.step,
            args.b.display(),
            ib.version,
            ib.step
        )));
    }

    let ds = Dataset::read(&args.data)?;
    let prompts = match args.prompts.as_str() {
        "eval" => ds.prompts.eval.clone(),
        "train" => ds.prompts.train.clone(),
        path => PromptSet::read(Path::new(path))?,
    };
    let estimator = cfg.train.flow.clone();
    let seeds = &cfg.eval.seeds;

    let names = [format!("a: {}", label(&args.a)), format!("b: {}", label(&args.b))];
    let mut reports = Vec::new();
    for (ckpt, info, tag) in [(&args.a, &ia, "a"), (&args.b, &ib, "b")] {
        let state = TrainState::load(ckpt, &info.config, &Device::Cpu)?;
        let decoder = Trainer::build_decoder(&info.config, &Device::Cpu)?;
        let source = GeneratorSource {
            generator: &state.generator,
            decoder: &decoder,
            timesteps: info.config.timesteps.clone(),
            chunks: info.config.window.chunks,
        };
        reports.push(evaluate_model(&source, &prompts, seeds, &estimator, &cfg.eval.metrics)?);
        if args.flow_png {
            let dir = args.out.join("flows").join(tag);
            for &seed in seeds {
                let video = source.sample(prompts.prompts(), seed)?;
                let flow = estimator.estimate(&video)?;
                for (i, p) in prompts.prompts().iter().enumerate() {
                    write_flow_pngs(&flow.item(i)?, &dir, &format!("p{:06}_s{seed}", p.id))?;
                }
            }
        }
    }
    let d = delta(&reports[0], &reports[1]);
    let rows = vec![
        (names[0].clone(), reports[0].clone()),
        (names[1].clone(), reports[1].clone()),
        ("delta (b - a)".to_string(), d),
    ];
    write_table(&args.out, "comparison", &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

pub fn viz(data: &Path, clip: u64, out: &Path, truth: bool) -> Result<(), Failure> {
    let ds = Dataset::read(data)?;
    let c = ds
        .clips
        .iter()
        .find(|c| c.record.id == clip)
        .ok_or_else(|| Failure::Config(format!("no clip with id {clip} in {}", data.display())))?;
    let flow = if truth {
        c.flow.clone()
    } else {
        RunConfig::default().train.flow.estimate(&c.video)?
    };
    let written = write_flow_pngs(&flow, out, &c.record.dir_name())?;
    println!("wrote {} frames to {}", written.len(), out.display());
    Ok(())
}

pub fn curves(run: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let run = RunDir::open(run);
    let records = run.read_metrics()?;
    if records.is_empty() {
        return Err(Failure::Runtime(format!("no metrics in {}", run.metrics_path().display())));
    }
    let steps: Vec<u64> = records.iter().map(|m| m.step).collect();
    let col = |f: fn(&StepMetrics) -> Option<f64>| records.iter().map(|m| f(m).unwrap_or(f64::NAN)).collect();
    let losses = [
        ("loss_dmd", col(|m| m.loss_dmd)),
        ("loss_fake", col(|m| m.loss_fake)),
        ("loss_gan_g", col(|m| m.loss_gan_g)),
        ("loss_gan_d", col(|m| m.loss_gan_d)),
        ("r1", col(|m| m.r1)),
        ("r2", col(|m| m.r2)),
    ];
    let norms = [
        ("grad_norm_dmd", col(|m| m.grad_norm_dmd)),
        ("grad_norm_fake", col(|m| m.grad_norm_fake)),
        ("grad_norm_gan", col(|m| m.grad_norm_gan)),
        ("grad_norm_disc", col(|m| m.grad_norm_disc)),
    ];
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run.samples_dir());
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_curves(&dir, "losses", &steps, &losses)?;
    write_curves(&dir, "grad_norms", &steps, &norms)?;
    println!("curves written to {}", dir.display());
    Ok(())
}
