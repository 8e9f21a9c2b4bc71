//! Numerical comparison of an original and a transformed model, layer by
//! layer, on random inputs.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{relative_error, Tensor3};

/// Default tolerance for exact transforms (lossless decoupling, full-rank
/// complements). Weights are stored as f32, so this sits well above f64
/// round-off.
pub const EXACT_TOL: f64 = 1e-5;
/// Default tolerance reported for approximate transforms.
pub const APPROX_TOL: f64 = 1e-4;
/// Spatial sizes larger than this are clamped when no explicit size is given.
pub const MAX_AUTO_HW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    pub trials: usize,
    /// Input spatial size used for every layer; `None` uses each layer's
    /// size in the model, clamped to [`MAX_AUTO_HW`].
    pub hw: Option<(usize, usize)>,
    pub seed: u64,
    pub tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            trials: 3,
            hw: None,
            seed: 0,
            tol: EXACT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerValidation {
    pub layer: String,
    pub kind: String,
    pub input_hw: (usize, usize),
    /// Worst `‖y_new - y_orig‖ / ‖y_orig‖` over all trials.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub layers: Vec<LayerValidation>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn random_input(shape: [usize; 3], rng: &mut SplitMix64) -> Tensor3 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor3::new(shape, data).expect("length matches shape")
}

/// Feeds identical random inputs to corresponding layers of both models.
pub fn validate_models(
    orig: &Model,
    new: &Model,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    if orig.len() != new.len() {
        return Err(Error::InvalidArgument(format!(
            "models have different layer counts ({} vs {})",
            orig.len(),
            new.len()
        )));
    }
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    if !(opts.tol.is_finite() && opts.tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid tolerance {}",
            opts.tol
        )));
    }
    for (a, b) in orig.layers.iter().zip(&new.layers) {
        if a.layer.shape() != b.layer.shape() {
            return Err(Error::Shape(format!(
                "layer `{}` has shape {:?} but `{}` has {:?}",
                a.layer.name(),
                a.layer.shape(),
                b.layer.name(),
                b.layer.shape()
            )));
        }
    }
    let dims = orig.layer_input_hw()?;

    let layers = orig
        .layers
        .par_iter()
        .zip(&new.layers)
        .zip(dims)
        .enumerate()
        .map(|(index, ((a, b), model_hw))| {
            let [_, n_i, k_h, k_w] = a.layer.shape();
            let hw = opts.hw.unwrap_or((
                model_hw.0.min(MAX_AUTO_HW).max(k_h),
                model_hw.1.min(MAX_AUTO_HW).max(k_w),
            ));
            let mut rng = SplitMix64::seed_from_u64(opts.seed.wrapping_add(index as u64));
            let mut worst: f64 = 0.0;
            for _ in 0..opts.trials {
                let x = random_input([n_i, hw.0, hw.1], &mut rng);
                let y0 = a.layer.forward(&x)?;
                let y1 = b.layer.forward(&x)?;
                let err = relative_error(y1.data(), y0.data());
                // NaN must not be swallowed by max()
                worst = if err.is_nan() {
                    f64::NAN
                } else {
                    worst.max(err)
                };
                if worst.is_nan() {
                    break;
                }
            }
            Ok(LayerValidation {
                layer: a.layer.name().to_string(),
                kind: b.layer.kind().to_string(),
                input_hw: hw,
                max_rel_error: worst,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let max_rel_error = layers.iter().fold(0.0f64, |m, l| {
        if l.max_rel_error.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(l.max_rel_error)
        }
    });
    Ok(ValidationReport {
        passed: max_rel_error <= opts.tol,
        layers,
        max_rel_error,
        tol: opts.tol,
    })
}
