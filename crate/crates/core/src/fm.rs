//! Flow-matching substrate: the linear noising path, parameterization
//! conversions, few-step sampling and backward simulation.
//!
//! Time convention: `t` weights the noise. `t = 0` is clean data and `t = 1` is
//! pure standard-normal noise, so `z_t = (1 - t) z_0 + t ε` and the target
//! velocity is `ε - z_0`. The background formulation with `t = 0` at the noise
//! endpoint maps onto this one through `t ↦ 1 - t`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, SeededRng};

/// Smallest timestep at which the score conversion is accepted.
pub const T_MIN: f64 = 1e-3;

/// Linear (rectified-flow) interpolant between data and noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FmSchedule;

impl FmSchedule {
    /// Weight on the data endpoint.
    pub fn data_weight(&self, t: f64) -> f64 {
        1.0 - t
    }

    /// Weight on the noise endpoint.
    pub fn noise_weight(&self, t: f64) -> f64 {
        t
    }

    /// Time in the data-at-one convention.
    pub fn to_data_at_one(&self, t: f64) -> f64 {
        1.0 - t
    }
}

/// Sorted distilled timesteps, most noisy first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DistilledTimesteps(Vec<f64>);

impl DistilledTimesteps {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let ok = !values.is_empty()
            && values[0] <= 1.0
            && values.iter().all(|t| *t > 0.0 && t.is_finite())
            && values.windows(2).all(|w| w[0] > w[1]);
        if ok {
            Ok(Self(values))
        } else {
            Err(Error::NonDescendingTimesteps(values))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `n` steps of the schedule.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.0.iter().copied().take(n).collect())
    }
}

impl Default for DistilledTimesteps {
    fn default() -> Self {
        Self(vec![1.0, 0.66, 0.33])
    }
}

impl TryFrom<Vec<f64>> for DistilledTimesteps {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DistilledTimesteps> for Vec<f64> {
    fn from(d: DistilledTimesteps) -> Self {
        d.0
    }
}

/// Anything that predicts a flow-matching velocity `ε - z_0`.
pub trait VelocityField {
    fn velocity(&self, z_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor>;
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimestepOutOfRange {
            t,
            range: "[0, 1]",
        })
    }
}

/// `(1 - t) z0 + t ε`.
pub fn noise_to_level(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    check_unit(t)?;
    ensure_same_shape(z0, eps)?;
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    Ok(((z0 * (1.0 - t))? + (eps * t)?)?)
}

/// Clean-sample prediction `z_t - t v`.
pub fn velocity_to_x0(z_t: &Tensor, v_hat: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    ensure_same_shape(z_t, v_hat)?;
    Ok((z_t - (v_hat * t)?)?)
}

/// Marginal score `-(z_t + (1 - t) v) / t` of the Gaussian path with noise std `t`.
pub fn velocity_to_score(z_t: &Tensor, v_hat: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    if t < T_MIN {
        return Err(Error::ScoreSingular { t, t_min: T_MIN });
    }
    ensure_same_shape(z_t, v_hat)?;
    Ok(((z_t + (v_hat * (1.0 - t))?)? * (-1.0 / t))?)
}

/// Inverse of [`velocity_to_score`]; undefined at `t = 1` where the score ignores `v`.
pub fn score_to_velocity(z_t: &Tensor, score: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    if t < T_MIN {
        return Err(Error::ScoreSingular { t, t_min: T_MIN });
    }
    if 1.0 - t < T_MIN {
        return Err(Error::TimestepOutOfRange {
            t,
            range: "(0, 1) for score → velocity",
        });
    }
    ensure_same_shape(z_t, score)?;
    Ok((((score * t)? + z_t)? * (-1.0 / (1.0 - t)))?)
}

/// Shape and placement of latent noise draws.
#[derive(Debug, Clone)]
pub struct LatentSpec {
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub device: Device,
}

impl LatentSpec {
    pub fn new(dims: &[usize], dtype: DType, device: &Device) -> Self {
        Self {
            dims: dims.to_vec(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn noise(&self, rng: &mut SeededRng) -> Result<Tensor> {
        rng.normal_tensor(&self.dims, self.dtype, &self.device)
    }
}

/// Few-step inference: predict `x0` at each distilled step and re-noise to the next.
pub fn few_step_sample(
    g: &dyn VelocityField,
    steps: &DistilledTimesteps,
    cond: &Tensor,
    spec: &LatentSpec,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let ts = steps.values();
    let mut z = spec.noise(rng)?;
    let mut x0 = z.clone();
    for (j, &t) in ts.iter().enumerate() {
        let v = g.velocity(&z, t, cond)?;
        x0 = velocity_to_x0(&z, &v, t)?.detach();
        if let Some(&next) = ts.get(j + 1) {
            let eps = spec.noise(rng)?;
            z = noise_to_level(&x0, next, &eps)?;
        }
    }
    Ok(x0)
}

/// [`few_step_sample`] with a fresh generator seeded by `seed`.
pub fn few_step_sample_seeded(
    g: &dyn VelocityField,
    steps: &DistilledTimesteps,
    cond: &Tensor,
    spec: &LatentSpec,
    seed: u64,
) -> Result<Tensor> {
    few_step_sample(g, steps, cond, spec, &mut SeededRng::new(seed))
}

/// Result of running the inference chain partway.
#[derive(Debug, Clone)]
pub struct BackwardSim {
    /// Noisy latent at the chosen distilled step, detached.
    pub noisy: Tensor,
    /// The distilled timestep `t_i`.
    pub t: f64,
    /// Zero-based index `i - 1` of the chosen step.
    pub index: usize,
    /// The generator's clean prediction at `t_i`, carrying the generator's graph.
    pub x0: Tensor,
}

/// Backward simulation with a uniformly chosen stopping step.
pub fn backward_simulate(
    g: &dyn VelocityField,
    steps: &DistilledTimesteps,
    cond: &Tensor,
    spec: &LatentSpec,
    rng: &mut SeededRng,
) -> Result<BackwardSim> {
    let index = rng.index(steps.len());
    backward_simulate_at(g, steps, cond, spec, index, rng)
}

/// Backward simulation stopping at a fixed step index.
///
/// Steps before `index` run as in inference with their outputs detached, so the
/// returned latent follows the inference-time distribution at that step; only
/// the final prediction keeps a gradient path.
pub fn backward_simulate_at(
    g: &dyn VelocityField,
    steps: &DistilledTimesteps,
    cond: &Tensor,
    spec: &LatentSpec,
    index: usize,
    rng: &mut SeededRng,
) -> Result<BackwardSim> {
    let ts = steps.values();
    if index >= ts.len() {
        return Err(Error::config(
            "step index",
            format!("{index} >= {} steps", ts.len()),
        ));
    }
    let mut z = spec.noise(rng)?;
    for j in 0..index {
        let v = g.velocity(&z, ts[j], cond)?;
        let x0 = velocity_to_x0(&z, &v, ts[j])?.detach();
        let eps = spec.noise(rng)?;
        z = noise_to_level(&x0, ts[j + 1], &eps)?;
    }
    let t = ts[index];
    let v = g.velocity(&z, t, cond)?;
    let x0 = velocity_to_x0(&z, &v, t)?;
    Ok(BackwardSim {
        noisy: z,
        t,
        index,
        x0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    /// Exact velocity for a point mass at `z_star`: `(z_t - z_star) / t`.
    struct PointMass(Tensor);

    impl VelocityField for PointMass {
        fn velocity(&self, z_t: &Tensor, t: f64, _cond: &Tensor) -> Result<Tensor> {
            Ok((z_t.broadcast_sub(&self.0)? / t)?)
        }
    }

    fn cond() -> Tensor {
        Tensor::new(&[0u32], &Device::Cpu).unwrap()
    }

    #[test]
    fn noising_endpoints_and_midpoint() {
        let z0 = t64(&[0.5, -2.0, 3.0]);
        let eps = t64(&[1.0, 1.0, 1.0]);
        assert!(close(&noise_to_level(&z0, 0.0, &eps).unwrap(), &z0, 0.0));
        assert!(close(&noise_to_level(&z0, 1.0, &eps).unwrap(), &eps, 0.0));
        let zero = t64(&[0.0, 0.0, 0.0]);
        let mid = noise_to_level(&zero, 0.3, &eps).unwrap();
        assert!(close(&mid, &t64(&[0.3, 0.3, 0.3]), 1e-15));
    }

    #[test]
    fn noising_rejects_shape_mismatch() {
        let err = noise_to_level(&t64(&[1.0, 2.0]), 0.5, &t64(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn x0_from_exact_velocity() {
        let z0 = t64(&[0.2, -1.0]);
        let eps = t64(&[1.5, 0.3]);
        let v = (&eps - &z0).unwrap();
        for t in [0.1, 0.5, 1.0] {
            let zt = noise_to_level(&z0, t, &eps).unwrap();
            assert!(close(&velocity_to_x0(&zt, &v, t).unwrap(), &z0, 1e-12));
        }
        // t = 0 is not singular for this direction.
        assert!(close(&velocity_to_x0(&z0, &v, 0.0).unwrap(), &z0, 0.0));
    }

    #[test]
    fn score_conversion_cases() {
        let eps = t64(&[0.7, -0.4]);
        let z0 = t64(&[1.0, 2.0]);
        let v = (&eps - &z0).unwrap();
        let s = velocity_to_score(&eps, &v, 1.0).unwrap();
        assert!(close(&s, &eps.neg().unwrap(), 1e-15));
        let zero = t64(&[0.0, 0.0]);
        assert!(close(&velocity_to_score(&zero, &zero, 0.4).unwrap(), &zero, 0.0));
        assert!(matches!(
            velocity_to_score(&zero, &zero, 1e-4),
            Err(Error::ScoreSingular { .. })
        ));
    }

    #[test]
    fn timesteps_validate_order() {
        assert!(DistilledTimesteps::new(vec![1.0, 0.66, 0.33]).is_ok());
        assert!(DistilledTimesteps::new(vec![0.33, 0.66]).is_err());
        assert!(DistilledTimesteps::new(vec![1.0, 1.0]).is_err());
        assert!(DistilledTimesteps::new(vec![1.2]).is_err());
        assert!(DistilledTimesteps::new(vec![0.5, 0.0]).is_err());
        assert!(DistilledTimesteps::new(vec![]).is_err());
    }

    #[test]
    fn point_mass_sampling_recovers_target() {
        let target = t64(&[0.25, -1.5, 2.0, 0.0]).reshape((1, 4)).unwrap();
        let g = PointMass(target.clone());
        let spec = LatentSpec::new(&[1, 4], DType::F64, &Device::Cpu);
        let steps = DistilledTimesteps::default();
        let out = few_step_sample_seeded(&g, &steps, &cond(), &spec, 5).unwrap();
        assert!(close(&out, &target, 1e-5));
        let sim = backward_simulate_at(&g, &steps, &cond(), &spec, 2, &mut SeededRng::new(1)).unwrap();
        assert!(close(&sim.x0, &target, 1e-5));
        assert_eq!(sim.t, 0.33);
    }

    #[test]
    fn sampling_is_deterministic_and_shape_preserving() {
        let g = PointMass(t64(&[0.1]));
        let steps = DistilledTimesteps::default();
        for n in 1..=3 {
            let spec = LatentSpec::new(&[2, 3, 4], DType::F64, &Device::Cpu);
            let s = steps.truncated(n).unwrap();
            let a = few_step_sample_seeded(&g, &s, &cond(), &spec, 9).unwrap();
            let b = few_step_sample_seeded(&g, &s, &cond(), &spec, 9).unwrap();
            assert_eq!(a.dims(), &[2, 3, 4]);
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn single_step_is_one_x0_prediction() {
        struct Affine;
        impl VelocityField for Affine {
            fn velocity(&self, z: &Tensor, t: f64, _c: &Tensor) -> Result<Tensor> {
                Ok(((z * 0.5)? + t)?)
            }
        }
        let spec = LatentSpec::new(&[1, 5], DType::F64, &Device::Cpu);
        let steps = DistilledTimesteps::new(vec![0.9]).unwrap();
        let out = few_step_sample_seeded(&Affine, &steps, &cond(), &spec, 3).unwrap();
        let noise = spec.noise(&mut SeededRng::new(3)).unwrap();
        let v = Affine.velocity(&noise, 0.9, &cond()).unwrap();
        let manual = velocity_to_x0(&noise, &v, 0.9).unwrap();
        assert!(close(&out, &manual, 0.0));
    }
}
