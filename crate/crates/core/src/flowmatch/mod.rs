//! Conditional flow matching in latent space.
//!
//! Data sits at `t = 0` and noise at `t = 1` on the straight path
//! `z_t = (1 - t) z0 + t z1`, so the regression target of the velocity field
//! is `z1 - z0` and sampling integrates from `t = 1` down to `t = 0`.

mod net;
mod sampler;
mod training;

pub use net::{VelocityNet, VelocityNetConfig, CHECKPOINT_KIND};
pub use sampler::{cfg_combine, cfg_velocity, sample, sample_batch, sample_seeded, sway_schedule, sway_warp, SamplerConfig, TimestepSchedule, VelocityField};
pub use training::{train_flow, FlowExample, FlowTrainConfig};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z_t: Matrix,
    pub t: f64,
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    Ok(())
}

/// `z_t = (1 - t) z0 + t z1`, with the endpoints returned exactly.
pub fn interpolate(z0: &Matrix, z1: &Matrix, t: f64) -> Result<FlowState> {
    same_shape(z0, z1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let z_t = if t == 0.0 {
        z0.clone()
    } else if t == 1.0 {
        z1.clone()
    } else {
        let data = z0
            .data
            .iter()
            .zip(&z1.data)
            .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
            .collect();
        Matrix::new(z0.rows, z0.cols, data)?
    };
    Ok(FlowState { z_t, t })
}

/// Mean over entries of `(v_pred - (z1 - z0))^2`.
pub fn fm_loss(v_pred: &[f64], z0: &[f64], z1: &[f64]) -> Result<f64> {
    if v_pred.len() != z0.len() || z0.len() != z1.len() {
        return Err(Error::Shape(format!(
            "fm_loss lengths {} / {} / {}",
            v_pred.len(),
            z0.len(),
            z1.len()
        )));
    }
    if v_pred.is_empty() {
        return Err(Error::Shape("fm_loss of empty input".into()));
    }
    let sum: f64 = v_pred
        .iter()
        .zip(z0.iter().zip(z1))
        .map(|(v, (a, b))| (v - (b - a)).powi(2))
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// [`fm_loss`] on matrices.
pub fn fm_loss_matrix(v_pred: &Matrix, z0: &Matrix, z1: &Matrix) -> Result<f64> {
    same_shape(v_pred, z0)?;
    same_shape(z0, z1)?;
    let f = |m: &Matrix| m.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    fm_loss(&f(v_pred), &f(z0), &f(z1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec_f64, seeded};

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = m(1, 2, &[1.0, 2.0]);
        assert_eq!(interpolate(&a, &m(1, 2, &[0.0, 0.0]), 0.0).unwrap().z_t, a);
        let b = m(1, 2, &[3.0, 4.0]);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().z_t, b);
        let mid = interpolate(&m(1, 2, &[2.0, 0.0]), &m(1, 2, &[0.0, 2.0]), 0.5).unwrap();
        assert_eq!(mid.z_t, m(1, 2, &[1.0, 1.0]));
        assert!(interpolate(&a, &m(2, 1, &[0.0, 0.0]), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn path_derivative_is_the_displacement() {
        let z0 = m(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let z1 = m(2, 2, &[1.5, 1.0, -2.0, 0.75]);
        let h = 1e-3;
        for t in [0.1, 0.4, 0.9] {
            let a = interpolate(&z0, &z1, t - h).unwrap().z_t;
            let b = interpolate(&z0, &z1, t + h).unwrap().z_t;
            for i in 0..4 {
                let d = (b.data[i] as f64 - a.data[i] as f64) / (2.0 * h);
                assert!((d - (z1.data[i] - z0.data[i]) as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn fm_loss_hand_values() {
        assert_eq!(fm_loss(&[2.0, -1.0], &[1.0, 1.0], &[3.0, 0.0]).unwrap(), 0.0);
        assert_eq!(fm_loss(&[1.0], &[0.0], &[2.0]).unwrap(), 1.0);
        assert!(fm_loss(&[1.0], &[0.0, 1.0], &[2.0]).is_err());
    }

    #[test]
    fn fm_loss_matches_elementwise_oracle() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let v = normal_vec_f64(&mut rng, 32);
            let a = normal_vec_f64(&mut rng, 32);
            let b = normal_vec_f64(&mut rng, 32);
            let mut oracle = 0.0;
            for i in 0..32 {
                let r = v[i] - b[i] + a[i];
                oracle += r * r / 32.0;
            }
            assert!((fm_loss(&v, &a, &b).unwrap() - oracle).abs() < 1e-12);
        }
    }
}
