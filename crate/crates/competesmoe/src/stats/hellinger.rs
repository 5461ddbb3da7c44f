//! Expected Hellinger distance between two conditional mixture densities.
//!
//! For fixed `x` both densities are one-dimensional mixtures of
//! Gaussians, so `h²(f₁, f₂) = ½∫(√f₁ − √f₂)² dy` is computed by Simpson
//! quadrature on a shared grid; the expectation over inputs is a plain
//! Monte Carlo average of `h` over uniform draws from the input box. The
//! grid is sized from the measures themselves — every reachable expert
//! mean padded by `pad_sigmas` standard deviations — and each density's
//! captured mass is checked so an under-covering grid fails loudly
//! instead of quietly reporting a distance that excludes real mass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{density, MixingMeasure};

/// Quadrature and sampling controls. The defaults satisfy the coverage
/// precondition for any measures inside the default Θ box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HellingerOptions {
    /// Monte Carlo draws of `x`.
    pub x_samples: usize,
    /// Grid half-padding beyond the extreme means, in units of the largest
    /// component standard deviation.
    pub pad_sigmas: f64,
    /// Grid points per smallest component standard deviation.
    pub points_per_std: usize,
}

impl Default for HellingerOptions {
    fn default() -> Self {
        HellingerOptions { x_samples: 64, pad_sigmas: 8.0, points_per_std: 12 }
    }
}

/// Simpson integral of tabulated values with spacing `h` (even interval
/// count).
fn simpson(values: &[f64], h: f64) -> f64 {
    let last = values.len() - 1;
    let mut acc = values[0] + values[last];
    for (i, v) in values.iter().enumerate().take(last).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

fn grid_for(g: &MixingMeasure, g_star: &MixingMeasure, opts: &HellingerOptions) -> (f64, f64, usize) {
    let atoms = g.atoms.iter().chain(&g_star.atoms);
    let mut mean_bound = 0.0f64;
    let mut var_max = 0.0f64;
    let mut var_min = f64::INFINITY;
    for a in atoms {
        // |w·x + b| ≤ ‖w‖₁ over the [-1,1] input box.
        mean_bound = mean_bound.max(a.w.iter().map(|w| w.abs()).sum());
        var_max = var_max.max(a.sigma);
        var_min = var_min.min(a.sigma);
    }
    let pad = opts.pad_sigmas * var_max.sqrt();
    let (lo, hi) = (-mean_bound - pad, mean_bound + pad);
    let h_target = var_min.sqrt() / opts.points_per_std.max(1) as f64;
    let mut intervals = ((hi - lo) / h_target).ceil() as usize;
    if intervals % 2 == 1 {
        intervals += 1;
    }
    (lo, hi, intervals.max(2))
}

/// `E_X[h(p_G(·|X), p_{G*}(·|X))]`: Monte Carlo over `x`, Simpson
/// quadrature in `y`. Fails with the captured mass if either density
/// leaks more than `1e-4` outside the grid.
pub fn hellinger_expected(
    g: &MixingMeasure,
    g_star: &MixingMeasure,
    k_top: usize,
    opts: &HellingerOptions,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if g.dim() != g_star.dim() {
        return Err(Error::Fit(format!(
            "measure dimensions differ: {} vs {}",
            g.dim(),
            g_star.dim()
        )));
    }
    assert!(opts.x_samples >= 1, "need at least one x sample");
    let d = g.dim();
    let (lo, hi, intervals) = grid_for(g, g_star, opts);
    let h_step = (hi - lo) / intervals as f64;

    let mut total = 0.0;
    let mut f1 = vec![0.0; intervals + 1];
    let mut f2 = vec![0.0; intervals + 1];
    let mut sq_diff = vec![0.0; intervals + 1];
    for _ in 0..opts.x_samples {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        for i in 0..=intervals {
            let y = lo + i as f64 * h_step;
            f1[i] = density(y, &x, g, k_top)?;
            f2[i] = density(y, &x, g_star, k_top)?;
            sq_diff[i] = (f1[i].sqrt() - f2[i].sqrt()).powi(2);
        }
        for f in [&f1, &f2] {
            let mass = simpson(f, h_step);
            if 1.0 - mass > 1e-4 {
                return Err(Error::QuadratureDeficit { mass });
            }
        }
        let h2 = (0.5 * simpson(&sq_diff, h_step)).clamp(0.0, 1.0);
        total += h2.sqrt();
    }
    Ok(total / opts.x_samples as f64)
}
