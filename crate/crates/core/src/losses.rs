//! Training objectives: DMD distribution matching, fake-score flow matching,
//! logistic GAN losses and the finite-perturbation R1/R2 penalties.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::discriminator::Critic;
use crate::error::{Error, Result};
use crate::fm::{noise_to_level, velocity_to_x0, VelocityField, T_MIN};
use crate::tensor::SeededRng;

/// Floor on the DMD normalizer so identical predictions never divide by zero.
const DMD_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Generator GAN weight.
    pub lambda1: f64,
    /// Discriminator GAN weight.
    pub lambda2: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    /// Standard deviation of the R1/R2 input perturbation.
    pub sigma: f64,
    pub dmd_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda_r1: 0.3,
            lambda_r2: 0.3,
            sigma: 0.01,
            dmd_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_r1", self.lambda_r1),
            ("lambda_r2", self.lambda_r2),
            ("sigma", self.sigma),
            ("dmd_weight", self.dmd_weight),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("weights.{name}"),
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        if (self.lambda_r1 > 0.0 || self.lambda_r2 > 0.0) && self.sigma <= 0.0 {
            return Err(Error::config("weights.sigma", "must be > 0 when R1/R2 are enabled"));
        }
        Ok(())
    }

    /// True when any adversarial term contributes.
    pub fn gan_enabled(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0 || self.lambda_r1 > 0.0 || self.lambda_r2 > 0.0
    }
}

/// `log(1 + e^x)` for a scalar, stable at both tails.
pub fn softplus_g(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Elementwise [`softplus_g`] on a tensor.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}

/// `mean g(-D(real)) + mean g(D(gen))`; `gen` is detached so only the critic learns.
pub fn gan_d_loss(d: &dyn Critic, real: &Tensor, gen: &Tensor) -> Result<Tensor> {
    let lr = d.logits(&real.detach())?;
    let lg = d.logits(&gen.detach())?;
    gan_d_loss_from_logits(&lr, &lg)
}

/// The critic loss given precomputed logits.
pub fn gan_d_loss_from_logits(real_logits: &Tensor, gen_logits: &Tensor) -> Result<Tensor> {
    Ok((softplus(&real_logits.neg()?)?.mean_all()? + softplus(gen_logits)?.mean_all()?)?)
}

/// `mean g(-D(gen))`. Pass a frozen critic view so only the generator learns.
pub fn gan_g_loss(d: &dyn Critic, gen: &Tensor) -> Result<Tensor> {
    Ok(softplus(&d.logits(gen)?.neg()?)?.mean_all()?)
}

/// `mean (D(o) - D(o + σε))²` with `o` held constant and one seeded draw of `ε`.
pub fn r_regularizer(d: &dyn Critic, o: &Tensor, sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let o = o.detach();
    let eps = rng.normal_like(&o)?;
    let perturbed = (&o + (eps * sigma)?)?;
    // One critic call over both halves; the critic acts per sample.
    let b = o.dims()[0];
    let l = d.logits(&Tensor::cat(&[&o, &perturbed], 0)?)?;
    let diff = (l.narrow(0, 0, b)? - l.narrow(0, b, b)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Output of the DMD surrogate.
#[derive(Debug, Clone)]
pub struct DmdOutput {
    /// Surrogate whose gradient with respect to `x0` is `grad / numel`.
    pub loss: Tensor,
    /// Normalized update direction `(x̂_fake - x̂_real) / w`, detached.
    pub grad: Tensor,
    pub t: f64,
}

/// Distribution-matching surrogate `½ mean (x0 - sg(x0 - Δ))²`.
///
/// `Δ = (x̂_fake - x̂_real) / w` compares the clean predictions of both
/// velocity fields at `z_t = (1-t) sg(x0) + t ε`; since each score is an affine
/// function of its clean prediction with a positive factor on `x̂`, `Δ` is the
/// score difference `s_fake - s_real` up to a positive scale, and descending
/// the surrogate moves `x0` along `s_real - s_fake`. The per-sample normalizer
/// `w` is the mean over non-batch dimensions of
/// `(|x0 - x̂_real| + |x0 - x̂_fake|) / 2`, symmetric in the two fields so that
/// swapping them negates `Δ` exactly.
pub fn dmd_loss(
    real: &dyn VelocityField,
    fake: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<DmdOutput> {
    if !(t > T_MIN && t <= 1.0) {
        return Err(Error::TimestepOutOfRange {
            t,
            range: "(t_min, 1] for distribution matching",
        });
    }
    let x0_const = x0.detach();
    let z_t = noise_to_level(&x0_const, t, eps)?;
    let p_real = velocity_to_x0(&z_t, &real.velocity(&z_t, t, cond)?, t)?.detach();
    let p_fake = velocity_to_x0(&z_t, &fake.velocity(&z_t, t, cond)?, t)?.detach();

    let b = x0.dims()[0];
    let spread = ((x0_const.broadcast_sub(&p_real)?.abs()? + x0_const.broadcast_sub(&p_fake)?.abs()?)? * 0.5)?;
    let norm = spread
        .reshape((b, ()))?
        .mean(D::Minus1)?
        .maximum(DMD_NORM_FLOOR)?;
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let grad = (p_fake - p_real)?.broadcast_div(&norm.reshape(shape)?)?;
    let target = (&x0_const - &grad)?.detach();
    let loss = ((x0 - target)?.sqr()?.mean_all()? * 0.5)?;
    Ok(DmdOutput { loss, grad, t })
}

/// [`dmd_loss`] drawing `t ~ U[t_lo, t_hi]` and `ε` from `rng`.
pub fn dmd_loss_sampled(
    real: &dyn VelocityField,
    fake: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    t_range: (f64, f64),
    rng: &mut SeededRng,
) -> Result<DmdOutput> {
    let t = rng.uniform(t_range.0, t_range.1);
    let eps = rng.normal_like(x0)?;
    dmd_loss(real, fake, x0, cond, t, &eps)
}

/// Flow-matching regression of the fake score onto the generator's samples:
/// `mean (v_fake(z_t, t) - (ε - sg(z0)))²`.
pub fn fake_score_loss(
    fake: &dyn VelocityField,
    z0_gen: &Tensor,
    cond: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    let z0 = z0_gen.detach();
    let z_t = noise_to_level(&z0, t, eps)?;
    let target = (eps - &z0)?;
    let v = fake.velocity(&z_t, t, cond)?;
    Ok((v - target)?.sqr()?.mean_all()?)
}

/// Unweighted adversarial terms of one step. `r1`/`r2` are absent when disabled.
#[derive(Debug, Clone)]
pub struct GanParts {
    pub gan_g: Tensor,
    pub gan_d: Tensor,
    pub r1: Option<Tensor>,
    pub r2: Option<Tensor>,
}

/// `(λ1 L_g, λ2 L_d + λR1 R1 + λR2 R2)`.
pub fn combined_gan_loss(weights: &LossWeights, parts: &GanParts) -> Result<(Tensor, Tensor)> {
    weights.validate()?;
    let gen = (&parts.gan_g * weights.lambda1)?;
    let mut disc = (&parts.gan_d * weights.lambda2)?;
    if let Some(r1) = &parts.r1 {
        disc = (disc + (r1 * weights.lambda_r1)?)?;
    }
    if let Some(r2) = &parts.r2 {
        disc = (disc + (r2 * weights.lambda_r2)?)?;
    }
    Ok((gen, disc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scalar;
    use candle_core::{DType, Device, Var};

    fn zero_critic(x: &Tensor) -> Result<Tensor> {
        Ok(x.flatten_from(1)?.sum(1)?.zeros_like()?)
    }

    #[test]
    fn softplus_values_and_tails() {
        assert!((softplus_g(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_g(100.0) - 100.0).abs() < 1e-6);
        assert!(softplus_g(-100.0) < 1e-40);
        let x = Tensor::new(&[-100.0f64, 0.0, 100.0, 3.5], &Device::Cpu).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        for (a, b) in y.iter().zip([-100.0, 0.0, 100.0, 3.5]) {
            assert!((a - softplus_g(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn gan_losses_at_fixed_logits() {
        let x = Tensor::zeros((2, 1), DType::F64, &Device::Cpu).unwrap();
        let d = scalar(&gan_d_loss(&zero_critic, &x, &x).unwrap()).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // +10 on positive inputs, -10 on negative ones
        let sign10 = |x: &Tensor| -> Result<Tensor> { Ok((x.sum(1)?.sign()? * 10.0)?) };
        let pos = Tensor::ones((2, 1), DType::F64, &Device::Cpu).unwrap();
        let neg = pos.neg().unwrap();
        let perfect = scalar(&gan_d_loss(&sign10, &pos, &neg).unwrap()).unwrap();
        assert!((perfect - 2.0 * softplus_g(-10.0)).abs() < 1e-12);
        assert!((perfect - 9.08e-5).abs() < 1e-7);
        let wrong = scalar(&gan_d_loss(&sign10, &neg, &pos).unwrap()).unwrap();
        assert!((wrong - 20.0).abs() < 1e-3);
        let g = scalar(&gan_g_loss(&sign10, &pos).unwrap()).unwrap();
        assert!((g - 4.54e-5).abs() < 1e-7);
        let g0 = scalar(&gan_g_loss(&zero_critic, &x).unwrap()).unwrap();
        assert!((g0 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn combined_weights_and_linearity() {
        let z = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        let parts = GanParts {
            gan_g: (z.clone() + std::f64::consts::LN_2).unwrap(),
            gan_d: (z.clone() + 2.0 * std::f64::consts::LN_2).unwrap(),
            r1: Some(z.clone()),
            r2: Some(z.clone()),
        };
        let (g, d) = combined_gan_loss(&LossWeights::default(), &parts).unwrap();
        assert!((scalar(&g).unwrap() - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((scalar(&d).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_r1: 0.0,
            lambda_r2: 0.0,
            ..LossWeights::default()
        };
        let (g, d) = combined_gan_loss(&zero, &parts).unwrap();
        assert_eq!((scalar(&g).unwrap(), scalar(&d).unwrap()), (0.0, 0.0));

        let double = LossWeights {
            lambda1: 1.0,
            ..LossWeights::default()
        };
        let (g2, _) = combined_gan_loss(&double, &parts).unwrap();
        assert_eq!(scalar(&g2).unwrap(), 2.0 * 0.5 * std::f64::consts::LN_2);

        let neg = LossWeights {
            lambda_r1: -0.1,
            ..LossWeights::default()
        };
        assert!(combined_gan_loss(&neg, &parts).unwrap_err().is_config());
    }

    #[test]
    fn r_regularizer_linear_closed_form() {
        let w = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let lin = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_mul(&w)?.sum(1)?) };
        let o = Tensor::new(&[[1.0f64, 2.0, 3.0]], &Device::Cpu).unwrap();
        let sigma = 0.01;
        let got = scalar(&r_regularizer(&lin, &o, sigma, &mut SeededRng::new(5)).unwrap()).unwrap();
        let eps = SeededRng::new(5).normal_vec(3);
        let dot: f64 = eps.iter().zip([0.5, -1.0, 2.0]).map(|(e, w)| e * w).sum();
        let want = (sigma * dot).powi(2);
        assert!((got - want).abs() <= 1e-6 * want.max(1e-12));
        let again = scalar(&r_regularizer(&lin, &o, sigma, &mut SeededRng::new(5)).unwrap()).unwrap();
        assert_eq!(got, again);
    }

    struct Affine(f64);

    impl VelocityField for Affine {
        fn velocity(&self, z: &Tensor, _t: f64, _c: &Tensor) -> Result<Tensor> {
            Ok((z * self.0)?)
        }
    }

    #[test]
    fn dmd_identical_fields_give_zero_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&SeededRng::new(1).normal_tensor(&[2, 6], DType::F64, &dev).unwrap()).unwrap();
        let eps = SeededRng::new(2).normal_tensor(&[2, 6], DType::F64, &dev).unwrap();
        let c = Tensor::new(&[0u32], &dev).unwrap();
        let out = dmd_loss(&Affine(0.3), &Affine(0.3), x.as_tensor(), &c, 0.5, &eps).unwrap();
        let g = out.loss.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap();
        assert_eq!(gx.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(dmd_loss(&Affine(0.3), &Affine(0.3), x.as_tensor(), &c, 0.0, &eps).is_err());
    }

    #[test]
    fn fake_score_closed_forms() {
        let dev = Device::Cpu;
        let z0 = SeededRng::new(3).normal_tensor(&[2, 5], DType::F64, &dev).unwrap();
        let eps = SeededRng::new(4).normal_tensor(&[2, 5], DType::F64, &dev).unwrap();
        let c = Tensor::new(&[0u32], &dev).unwrap();
        let zero = scalar(&fake_score_loss(&Affine(0.0), &z0, &c, 0.4, &eps).unwrap()).unwrap();
        let want = scalar(&(&eps - &z0).unwrap().sqr().unwrap().mean_all().unwrap()).unwrap();
        assert!((zero - want).abs() < 1e-12);

        struct Exact(Tensor);
        impl VelocityField for Exact {
            fn velocity(&self, _z: &Tensor, _t: f64, _c: &Tensor) -> Result<Tensor> {
                Ok(self.0.clone())
            }
        }
        let exact = Exact((&eps - &z0).unwrap());
        assert_eq!(scalar(&fake_score_loss(&exact, &z0, &c, 0.4, &eps).unwrap()).unwrap(), 0.0);
    }
}
