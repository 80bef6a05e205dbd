mod common;

use candle_core::{DType, Device, Tensor, Var};
use mogan_core::discriminator::{Critic, DiscriminatorConfig, MotionDiscriminator};
use mogan_core::fm::{backward_simulate_at, few_step_sample, DistilledTimesteps, LatentSpec, VelocityField};
use mogan_core::losses::{dmd_loss, fake_score_loss, gan_d_loss, gan_g_loss, r_regularizer};
use mogan_core::models::{ChunkRecurrentDecoder, DecoderConfig, DitConfig, DitVelocityNet, FakeScoreNet, Frozen, GeneratorNet, TeacherNet};
use mogan_core::nn::ParamSet;
use mogan_core::SeededRng;

use common::{central_difference, rel_err, tiny_config, tiny_trainer, values};

const DEV: Device = Device::Cpu;

fn small_dit(seed: u64, dtype: DType) -> DitVelocityNet {
    let cfg = DitConfig {
        width: 16,
        depth: 1,
        heads: 2,
        zero_init: false,
        ..DitConfig::default()
    };
    DitVelocityNet::init(cfg, seed, dtype, &DEV).unwrap()
}

fn small_disc(dtype: DType) -> MotionDiscriminator {
    let cfg = DiscriminatorConfig {
        width: 16,
        depth: 2,
        heads: 2,
        head_depths: vec![1, 2],
        head_width: 8,
        fusion_width: 8,
        ..DiscriminatorConfig::default()
    };
    MotionDiscriminator::init(cfg, 4, dtype, &DEV).unwrap()
}

fn untouched(params: &ParamSet, grads: &candle_core::backprop::GradStore) -> bool {
    params.iter().all(|(_, v)| match grads.get(v) {
        None => true,
        Some(g) => values(g).iter().all(|&x| x == 0.0),
    })
}

#[test]
fn each_loss_reaches_only_its_own_parameters() {
    let (trainer, state) = tiny_trainer(tiny_config(0));
    let cfg = trainer.config();
    let mut rng = SeededRng::new(1);
    let cond = Tensor::new(&[0u32, 3], &DEV).unwrap();
    let spec = LatentSpec::new(&cfg.latent_dims(2), cfg.dtype(), &DEV);
    let sim = backward_simulate_at(&state.generator.tracked(), &cfg.timesteps, &cond, &spec, 1, &mut rng).unwrap();
    let o_gen = trainer.disc_input(&sim.x0, 0, true).unwrap();
    let o_real = trainer.disc_input(&spec.noise(&mut rng).unwrap(), 0, false).unwrap();

    let gd = gan_d_loss(&state.disc.tracked(), &o_real, &o_gen).unwrap().backward().unwrap();
    assert!(untouched(state.generator.params(), &gd));
    assert!(!untouched(state.disc.params(), &gd));

    let gg = gan_g_loss(&state.disc.frozen(), &o_gen).unwrap().backward().unwrap();
    assert!(untouched(state.disc.params(), &gg));
    assert!(!untouched(state.generator.params(), &gg), "generator gets an adversarial gradient");

    let r = r_regularizer(&state.disc.tracked(), &o_gen, 0.01, &mut rng).unwrap().backward().unwrap();
    assert!(untouched(state.generator.params(), &r));

    let eps = rng.normal_like(&sim.x0).unwrap();
    let fs = fake_score_loss(&state.fake.tracked(), &sim.x0, &cond, 0.5, &eps).unwrap().backward().unwrap();
    assert!(untouched(state.generator.params(), &fs));
    assert!(!untouched(state.fake.params(), &fs));
}

#[test]
fn losses_stay_finite_over_random_batches() {
    let teacher = small_dit(1, DType::F32);
    let fake = small_dit(2, DType::F32);
    let disc = small_disc(DType::F32);
    let mut rng = SeededRng::new(3);
    for i in 0..1000 {
        let scale = [0.1, 1.0, 10.0][i % 3];
        let z = (rng.normal_tensor(&[1, 2, 4, 8, 8], DType::F32, &DEV).unwrap() * scale).unwrap();
        let cond = Tensor::new(&[(i % 8) as u32], &DEV).unwrap();
        let t = rng.uniform(0.02, 0.98);
        let eps = rng.normal_like(&z).unwrap();
        let o = (rng.normal_tensor(&[2, 4, 3, 16, 16], DType::F32, &DEV).unwrap() * scale).unwrap();
        let (a, b) = (o.narrow(0, 0, 1).unwrap(), o.narrow(0, 1, 1).unwrap());
        let all = [
            dmd_loss(&Frozen(&teacher), &Frozen(&fake), &z, &cond, t, &eps).unwrap().loss,
            fake_score_loss(&Frozen(&fake), &z, &cond, t, &eps).unwrap(),
            gan_d_loss(&disc.tracked(), &a, &b).unwrap(),
            gan_g_loss(&disc.frozen(), &b).unwrap(),
            r_regularizer(&disc.tracked(), &a, 0.01, &mut rng).unwrap(),
        ];
        for (k, l) in all.iter().enumerate() {
            let v = l.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
            assert!(v.is_finite() && v >= 0.0, "batch {i} loss {k}: {v}");
        }
    }
}

#[test]
fn swapping_score_fields_negates_the_update() {
    let a = small_dit(1, DType::F64);
    let b = small_dit(2, DType::F64);
    let mut rng = SeededRng::new(4);
    let x0 = rng.normal_tensor(&[2, 3, 4, 8, 8], DType::F64, &DEV).unwrap();
    let eps = rng.normal_like(&x0).unwrap();
    let cond = Tensor::new(&[1u32, 6], &DEV).unwrap();
    let fwd = values(&dmd_loss(&Frozen(&a), &Frozen(&b), &x0, &cond, 0.4, &eps).unwrap().grad);
    let bwd = values(&dmd_loss(&Frozen(&b), &Frozen(&a), &x0, &cond, 0.4, &eps).unwrap().grad);
    assert!(fwd.iter().any(|&v| v != 0.0));
    assert_eq!(fwd, bwd.iter().map(|v| -v).collect::<Vec<_>>());
}

#[test]
fn dmd_gradient_is_finite_at_both_ends_of_the_range() {
    let real = small_dit(1, DType::F64);
    let fake = small_dit(2, DType::F64);
    let mut rng = SeededRng::new(5);
    let x0 = Var::from_tensor(&rng.normal_tensor(&[1, 2, 4, 8, 8], DType::F64, &DEV).unwrap()).unwrap();
    let eps = rng.normal_like(x0.as_tensor()).unwrap();
    let cond = Tensor::new(&[2u32], &DEV).unwrap();
    for t in [0.02, 0.0200001, 0.5, 0.9799999, 0.98, 1.0] {
        let out = dmd_loss(&Frozen(&real), &Frozen(&fake), x0.as_tensor(), &cond, t, &eps).unwrap();
        let g = values(out.loss.backward().unwrap().get(&x0).unwrap());
        assert!(g.iter().all(|v| v.is_finite()), "t = {t}");
        assert!(g.iter().any(|&v| v != 0.0), "t = {t}");
    }
    assert!(dmd_loss(&Frozen(&real), &Frozen(&fake), x0.as_tensor(), &cond, 1e-4, &eps).is_err());
}

#[test]
fn critic_at_equilibrium_has_no_logit_gradient() {
    // D ≡ 0 through a learnable bias: real and generated inputs coincide.
    let bias = Var::zeros(1, DType::F64, &DEV).unwrap();
    let critic = |x: &Tensor| -> mogan_core::Result<Tensor> {
        let zero = x.flatten_from(1)?.sum(1)?.zeros_like()?;
        Ok(zero.broadcast_add(bias.as_tensor())?)
    };
    let o = SeededRng::new(6).normal_tensor(&[3, 2, 3, 8, 8], DType::F64, &DEV).unwrap();
    let grads = gan_d_loss(&critic, &o, &o).unwrap().backward().unwrap();
    assert_eq!(values(grads.get(&bias).unwrap()), vec![0.0]);
}

#[test]
fn critic_logit_matches_finite_differences_in_its_input() {
    let disc = small_disc(DType::F64);
    let x = Var::from_tensor(&SeededRng::new(7).normal_tensor(&[1, 4, 3, 16, 16], DType::F64, &DEV).unwrap()).unwrap();
    let logit = || disc.frozen().logits(x.as_tensor()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    let g = values(disc.frozen().logits(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap().get(&x).unwrap());
    assert!(g.iter().all(|v| v.is_finite()));
    let mut rng = SeededRng::new(8);
    let mut f = logit;
    for _ in 0..30 {
        let i = rng.index(g.len());
        let n = central_difference(&x, i, 1e-5, &mut f);
        assert!(rel_err(g[i], n) < 1e-3 || (g[i] - n).abs() < 1e-9, "coord {i}: {} vs {n}", g[i]);
    }
}

#[test]
fn fake_score_starts_as_the_teacher() {
    let teacher = TeacherNet::new(small_dit(9, DType::F32));
    let fake = FakeScoreNet::from_teacher(&teacher).unwrap();
    let mut rng = SeededRng::new(10);
    for t in [0.05, 0.5, 1.0] {
        let z = rng.normal_tensor(&[2, 3, 4, 8, 8], DType::F32, &DEV).unwrap();
        let cond = Tensor::new(&[0u32, 7], &DEV).unwrap();
        let a = values(&teacher.velocity_field().velocity(&z, t, &cond).unwrap());
        let b = values(&fake.frozen().velocity(&z, t, &cond).unwrap());
        assert_eq!(a, b);
    }
    assert_eq!(teacher.content_hash().unwrap(), fake.params().content_hash().unwrap());
}

#[test]
fn sampling_keeps_the_latent_shape_for_every_step_count() {
    let g = GeneratorNet(small_dit(11, DType::F32));
    let all = DistilledTimesteps::new(vec![1.0, 0.66, 0.33]).unwrap();
    let spec = LatentSpec::new(&[2, 5, 4, 8, 8], DType::F32, &DEV);
    let cond = Tensor::new(&[1u32, 2], &DEV).unwrap();
    for n in 1..=3 {
        let steps = all.truncated(n).unwrap();
        let x = few_step_sample(&g.frozen(), &steps, &cond, &spec, &mut SeededRng::new(n as u64)).unwrap();
        assert_eq!(x.dims(), &[2, 5, 4, 8, 8]);
        assert!(values(&x).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn decoder_emits_f_frames_per_chunk() {
    let dec = ChunkRecurrentDecoder::new(DecoderConfig::default(), DType::F32, &DEV).unwrap();
    let f = dec.config().frames_per_chunk();
    for k in [1, 3, 7] {
        let z = SeededRng::new(k as u64).normal_tensor(&[1, k, 4, 8, 8], DType::F32, &DEV).unwrap();
        assert_eq!(dec.decode(&z).unwrap().frames(), k * f);
    }
}

#[test]
fn teacher_hash_is_stable_through_training() {
    let (trainer, mut state) = tiny_trainer(tiny_config(12));
    let before = state.teacher.content_hash().unwrap();
    assert_eq!(before, state.teacher_hash());
    trainer.run(&mut state, 6, |_, s| s.verify_teacher()).unwrap();
    assert_eq!(state.teacher.content_hash().unwrap(), before);
}
