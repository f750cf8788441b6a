//! Timestep schedules, classifier-free guidance and the Euler sampler.

use std::f64::consts::FRAC_PI_2;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, normal_vec, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub guidance_scale: f64,
    pub sway_s: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 20,
            guidance_scale: 5.0,
            sway_s: -1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config("guidance scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Integration times from noise (`1`) to data (`0`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    timesteps: Vec<f64>,
}

impl TimestepSchedule {
    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn nfe(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// `(t_k, t_{k+1} - t_k)` per step; step sizes are negative.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

/// `f(u) = u + s (cos(pi u / 2) - 1 + u)`.
pub fn sway_warp(u: f64, s: f64) -> f64 {
    u + s * ((FRAC_PI_2 * u).cos() - 1.0 + u)
}

/// Warped uniform grid, reversed so it runs from 1 to 0.
pub fn sway_schedule(nfe: usize, s: f64) -> Result<TimestepSchedule> {
    if nfe == 0 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    if !(-1.0..=0.0).contains(&s) {
        return Err(Error::Config(format!("sway coefficient {s} outside [-1, 0]")));
    }
    let timesteps = (0..=nfe)
        .map(|k| {
            if k == 0 {
                1.0
            } else if k == nfe {
                0.0
            } else {
                1.0 - sway_warp(k as f64 / nfe as f64, s)
            }
        })
        .collect();
    Ok(TimestepSchedule { timesteps })
}

/// A (possibly conditional) velocity field over batched latents.
pub trait VelocityField {
    /// `z`: `(B, L, D)`; `t`: one time per batch item; `cond`: `(B, N, C)`
    /// or `None` for the unconditional field.
    fn velocity(&self, z: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor>;
}

/// `v_null + g (v_cond - v_null)`.
pub fn cfg_combine(v_null: &Tensor, v_cond: &Tensor, g: f64) -> Result<Tensor> {
    Ok((v_null + ((v_cond - v_null)? * g)?)?)
}

/// Guided velocity. `g = 1` and `g = 0` return the single field they
/// collapse to without evaluating the other.
pub fn cfg_velocity<F: VelocityField + ?Sized>(field: &F, z: &Tensor, t: &[f64], cond: &Tensor, g: f64) -> Result<Tensor> {
    if g == 1.0 {
        return field.velocity(z, t, Some(cond));
    }
    let v_null = field.velocity(z, t, None)?;
    if g == 0.0 {
        return Ok(v_null);
    }
    let v_cond = field.velocity(z, t, Some(cond))?;
    cfg_combine(&v_null, &v_cond, g)
}

/// Euler integration of a batch; item `i` starts from noise seeded with
/// `derive_seed(sampler.seed, i)`. `cond`: `(B, N, C)`.
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    cond: &Tensor,
    sampler: &SamplerConfig,
    len: usize,
    dim: usize,
    dtype: DType,
) -> Result<Vec<Matrix>> {
    let seeds: Vec<u64> = (0..cond.dim(0)? as u64).map(|i| derive_seed(sampler.seed, i)).collect();
    sample_seeded(field, cond, &seeds, sampler, len, dim, dtype)
}

/// Euler integration with one explicit noise seed per batch item
/// (`sampler.seed` is ignored).
pub fn sample_seeded<F: VelocityField + ?Sized>(
    field: &F,
    cond: &Tensor,
    seeds: &[u64],
    sampler: &SamplerConfig,
    len: usize,
    dim: usize,
    dtype: DType,
) -> Result<Vec<Matrix>> {
    sampler.validate()?;
    let schedule = sway_schedule(sampler.nfe, sampler.sway_s)?;
    let b = cond.dim(0)?;
    if seeds.len() != b {
        return Err(Error::Shape(format!("{} seeds for a batch of {b}", seeds.len())));
    }
    let noise: Vec<f32> = seeds.iter().flat_map(|&s| normal_vec(&mut seeded(s), len * dim)).collect();
    let mut z = Tensor::from_vec(noise, (b, len, dim), &Device::Cpu)?.to_dtype(dtype)?;
    let cond = cond.to_dtype(dtype)?;
    for (k, (t, dt)) in schedule.steps().enumerate() {
        let v = cfg_velocity(field, &z, &vec![t; b], &cond, sampler.guidance_scale)?;
        z = (&z + (v * dt)?)?;
        let finite = z
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { step: k });
        }
    }
    (0..b).map(|i| Matrix::from_tensor(&z.get(i)?)).collect()
}

/// Single-item [`sample_batch`]; `cond` is `N x C`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    cond: &Matrix,
    sampler: &SamplerConfig,
    len: usize,
    dim: usize,
    dtype: DType,
) -> Result<Matrix> {
    let c = cond.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?;
    Ok(sample_batch(field, &c, sampler, len, dim, dtype)?.remove(0))
}
