//! Central finite-difference gradient checks for parameters in a
//! [`ParamStore`] (run in `f64`).

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{scalar, ParamStore};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps exactly-zero
    /// gradients from dividing by rounding noise.
    pub fn relative_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / denom
    }
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    data[index] = value;
    var.set(&Tensor::from_vec(data, var.shape(), var.device())?)?;
    Ok(())
}

/// Compares the analytic gradient of `loss` against central differences
/// for `count` parameter entries drawn with `seed` from variables whose
/// name starts with `prefix`.
pub fn check<F>(store: &ParamStore, prefix: &str, loss: F, count: usize, h: f64, seed: u64) -> Result<Vec<GradSample>>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::Invalid("gradient checks need a 64-bit parameter store".into()));
    }
    let vars: Vec<(String, Var)> = store
        .named_vars()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    if vars.is_empty() {
        return Err(Error::Invalid(format!("no parameters under prefix {prefix:?}")));
    }
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let grads = loss()?.backward()?;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        // Uniform over scalar entries, not over tensors.
        let mut flat = rng.random_range(0..total);
        let (name, var) = vars
            .iter()
            .find(|(_, v)| {
                if flat < v.elem_count() {
                    true
                } else {
                    flat -= v.elem_count();
                    false
                }
            })
            .expect("index within total");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[flat],
            None => 0.0,
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?[flat];
        set_element(var, flat, original + h)?;
        let plus = scalar(&loss()?)?;
        set_element(var, flat, original - h)?;
        let minus = scalar(&loss()?)?;
        set_element(var, flat, original)?;
        out.push(GradSample {
            param: name.clone(),
            index: flat,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(out)
}

pub fn max_relative_error(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::relative_error).fold(0.0, f64::max)
}
