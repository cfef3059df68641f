//! Rectified-flow objective and Euler ODE sampler.
//!
//! Convention: `z_t = (1 − t) z + t ε`, target `v = ε − z`, sampling runs
//! from `t = 1` (noise) down to `t = 0`.

use candle_core::Tensor;
use ndarray::{Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z: Array4<f64>,
    pub eps: Array4<f64>,
    pub t: f64,
    pub z_t: Array4<f64>,
    pub v_target: Array4<f64>,
}

pub fn make_training_pair(z: Array4<f64>, eps: Array4<f64>, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::Config(format!("flow time {t} outside [0, 1]")));
    }
    if z.dim() != eps.dim() {
        return Err(ModelError::shape("noise", z.dim(), eps.dim()));
    }
    let z_t = Zip::from(&z).and(&eps).map_collect(|&a, &e| (1.0 - t) * a + t * e);
    let v_target = Zip::from(&z).and(&eps).map_collect(|&a, &e| e - a);
    Ok(FlowSample { z, eps, t, z_t, v_target })
}

/// Standard Gaussian array from a seeded ChaCha stream.
pub fn gaussian(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    LogitNormal {
        mean: f64,
        std: f64,
    },
}

impl TimeSampling {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.random::<f64>(),
            TimeSampling::LogitNormal { mean, std } => {
                let x: f64 = Normal::new(mean, std).expect("valid logit-normal").sample(rng);
                1.0 / (1.0 + (-x).exp())
            }
        }
    }
}

/// Anything that predicts a velocity for a state at flow time `t`.
pub trait VelocityField {
    fn velocity(&self, z_t: &Array4<f64>, t: f64) -> Result<Array4<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(&Array4<f64>, f64) -> Result<Array4<f64>>,
{
    fn velocity(&self, z_t: &Array4<f64>, t: f64) -> Result<Array4<f64>> {
        self(z_t, t)
    }
}

/// Euler integration from `init` at `t = 1` to `t = 0` on a uniform grid.
pub fn integrate(field: &dyn VelocityField, init: Array4<f64>, steps: usize) -> Result<Array4<f64>> {
    if steps == 0 {
        return Err(ModelError::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = init;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&z, t)?;
        if v.dim() != z.dim() {
            return Err(ModelError::shape("velocity", z.dim(), v.dim()));
        }
        z.scaled_add(-dt, &v);
    }
    Ok(z)
}

/// Draws `z₁ ~ N(0, I)` from `seed` and integrates to `t = 0`.
pub fn sample(
    field: &dyn VelocityField,
    shape: (usize, usize, usize, usize),
    steps: usize,
    seed: u64,
) -> Result<Array4<f64>> {
    integrate(field, gaussian(shape, seed), steps)
}

/// Mean squared error; non-finite values are reported as errors.
pub fn mse(pred: &Tensor, target: &Tensor, step: usize) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(ModelError::shape("velocity prediction", target.dims(), pred.dims()));
    }
    let loss = (pred - target)?.sqr()?.mean_all()?;
    let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(ModelError::NonFinite {
            step,
            detail: format!("loss = {v}"),
        });
    }
    Ok(loss)
}
