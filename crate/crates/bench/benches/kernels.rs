use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use mogan_bench::{bench_trainer, latent_batch, sprite_clip};
use mogan_core::discriminator::Critic;
use mogan_core::flow::{FlowEstimator, HornSchunck};
use mogan_core::fm::VelocityField;

fn horn_schunck(c: &mut Criterion) {
    let hs = HornSchunck::default();
    let clip = sprite_clip(16, 32).unwrap();
    c.bench_function("horn_schunck_16x32x32", |b| b.iter(|| hs.estimate(&clip).unwrap()));
}

fn networks(c: &mut Criterion) {
    let (trainer, state) = bench_trainer().unwrap();
    let cfg = trainer.config();
    let (z, cond) = latent_batch(cfg, cfg.gen_batch, 1).unwrap();
    c.bench_function("dit_forward", |b| {
        b.iter(|| state.generator.frozen().velocity(&z, 0.66, &cond).unwrap())
    });

    let motion = trainer.disc_input(&z, 0, false).unwrap();
    c.bench_function("discriminator_forward", |b| {
        b.iter(|| state.disc.frozen().logits(&motion).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let (trainer, state) = bench_trainer().unwrap();
    let mut g = c.benchmark_group("trainer");
    g.sample_size(10);
    g.bench_function("train_step", |b| {
        b.iter_batched(|| state.fork().unwrap(), |mut s| trainer.step(&mut s).unwrap(), BatchSize::PerIteration)
    });
    g.finish();
}

criterion_group!(benches, horn_schunck, networks, train_step);
criterion_main!(benches);
