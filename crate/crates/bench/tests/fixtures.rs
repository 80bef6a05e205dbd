use mogan_bench::{bench_trainer, latent_batch, sprite_clip};

#[test]
fn fixtures_build_and_one_step_runs() {
    let clip = sprite_clip(16, 32).unwrap();
    assert_eq!(clip.frames(), 16);
    let (trainer, mut state) = bench_trainer().unwrap();
    let (z, cond) = latent_batch(trainer.config(), 2, 0).unwrap();
    assert_eq!(z.dims()[0], 2);
    assert_eq!(cond.dims(), &[2]);
    let m = trainer.step(&mut state).unwrap();
    assert!(m.loss_gan_d.is_some_and(f64::is_finite));
}
