//! Statistical workbench: the competition-gated Gaussian mixture as a
//! regression model.
//!
//! This half of the crate studies the estimation side of competition
//! routing in isolation. The model density is
//!
//! ```text
//! p_G(y | x) = Σ_i softmax(TopK(|g(x, W_i)|, K))_i · N(y; g(x, W_i), σ_i)
//! ```
//!
//! with affine scalar experts `g(x, W) = w·x + b` over a bounded input
//! box, `σ_i` a **variance**, and `G` the mixing measure collecting the
//! `(W_i, σ_i)` atoms. The workbench simulates datasets from a true
//! measure, refits by maximum likelihood, and measures how fast the fits
//! approach the truth in expected Hellinger distance and in the
//! Voronoi-cell parameter loss — empirically tracing the `√(log n / n)`
//! convergence the competition gate is supposed to admit.
//!
//! Scalar experts use the absolute value of their output as the affinity
//! score where the language model uses a vector norm; same competition,
//! one dimension.
//!
//! Everything here is plain `f64` slices except the likelihood ascent in
//! [`fit`], which builds the objective on the autodiff tape.

mod fit;
mod hellinger;
mod rates;
mod voronoi;

pub use fit::{mle_fit, refine, FitOptions};
pub use hellinger::{hellinger_expected, HellingerOptions};
pub use rates::{rate_experiment, summary_json, write_rates_csv, RateCurve, RateExperimentConfig, RateReport, TrialRecord};
pub use voronoi::voronoi_loss;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::topk_mask;

/// One mixture component: affine expert weights `w = [w_1..w_d, b]` and a
/// Gaussian noise **variance** `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub w: Vec<f64>,
    pub sigma: f64,
}

impl Atom {
    pub fn new(w: Vec<f64>, sigma: f64) -> Atom {
        Atom { w, sigma }
    }

    /// Expert output `w·x + b`.
    pub fn mean(&self, x: &[f64]) -> f64 {
        assert_eq!(self.w.len(), x.len() + 1, "atom dimension vs input dimension");
        self.w[..x.len()].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.w[x.len()]
    }

    /// Euclidean distance on the concatenated `(w, σ)` vector.
    pub fn distance(&self, other: &Atom) -> f64 {
        let dw: f64 = self
            .w
            .iter()
            .zip(&other.w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (dw + (self.sigma - other.sigma).powi(2)).sqrt()
    }
}

/// Bounds of the compact parameter space Θ: every expert weight in
/// `[-w_abs, w_abs]` and every variance in `[sigma_min, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaBox {
    pub w_abs: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ThetaBox {
    fn default() -> Self {
        ThetaBox { w_abs: 5.0, sigma_min: 0.05, sigma_max: 5.0 }
    }
}

impl ThetaBox {
    pub fn contains(&self, atom: &Atom) -> bool {
        atom.w.iter().all(|w| w.abs() <= self.w_abs)
            && atom.sigma >= self.sigma_min
            && atom.sigma <= self.sigma_max
    }
}

/// A discrete mixing measure: the multiset of expert atoms. Atoms must be
/// pairwise distinct and share one dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    pub atoms: Vec<Atom>,
}

impl MixingMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<MixingMeasure> {
        if atoms.is_empty() {
            return Err(Error::Fit("mixing measure needs at least one atom".to_string()));
        }
        let q = atoms[0].w.len();
        if q < 2 {
            return Err(Error::Fit(
                "atoms need at least a weight and a bias slot".to_string(),
            ));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.w.len() != q {
                return Err(Error::Fit(format!(
                    "atom {i} has dimension {} but atom 0 has {q}",
                    a.w.len()
                )));
            }
            if !(a.sigma > 0.0) {
                return Err(Error::Fit(format!(
                    "atom {i} has non-positive variance {}",
                    a.sigma
                )));
            }
            for (j, b) in atoms[..i].iter().enumerate() {
                if a == b {
                    return Err(Error::Fit(format!("atoms {j} and {i} coincide")));
                }
            }
        }
        Ok(MixingMeasure { atoms })
    }

    /// Number of atoms k*.
    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    /// Input dimension d (atoms carry q = d+1 weights).
    pub fn dim(&self) -> usize {
        self.atoms[0].w.len() - 1
    }

    pub fn validate_in(&self, theta: &ThetaBox) -> Result<()> {
        for (i, a) in self.atoms.iter().enumerate() {
            if !theta.contains(a) {
                return Err(Error::Fit(format!(
                    "atom {i} ({:?}, σ={}) lies outside Θ (|w| ≤ {}, σ ∈ [{}, {}])",
                    a.w, a.sigma, theta.w_abs, theta.sigma_min, theta.sigma_max
                )));
            }
        }
        Ok(())
    }
}

/// One simulated observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Competition gating probabilities at `x`: softmax over the K largest
/// `|g(x, W_i)|`, exactly zero elsewhere. Ties break toward the lower
/// atom index.
pub fn gating_probs(x: &[f64], g: &MixingMeasure, k: usize) -> Result<Vec<f64>> {
    let scores: Vec<f64> = g.atoms.iter().map(|a| a.mean(x).abs()).collect();
    let masked = topk_mask(&scores, k)?;
    let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = masked.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

fn gaussian_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
    norm * (-(y - mean) * (y - mean) / (2.0 * variance)).exp()
}

/// The model density `p_G(y | x)`.
pub fn density(y: f64, x: &[f64], g: &MixingMeasure, k: usize) -> Result<f64> {
    let probs = gating_probs(x, g, k)?;
    Ok(g
        .atoms
        .iter()
        .zip(&probs)
        .map(|(a, &p)| if p > 0.0 { p * gaussian_pdf(y, a.mean(x), a.sigma) } else { 0.0 })
        .sum())
}

/// Ancestral sampling from the model: `x` uniform over `[-1, 1]^d`, a
/// component index from the gating probabilities at `x`, then
/// `y ~ N(g(x, W_i), σ_i)`.
pub fn sample_dataset(
    g: &MixingMeasure,
    k: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticSample>> {
    assert!(n >= 1, "sample_dataset needs n >= 1");
    let d = g.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let probs = gating_probs(&x, g, k)?;
        let i = WeightedIndex::new(&probs)
            .expect("gating probabilities are a valid distribution")
            .sample(rng);
        let atom = &g.atoms[i];
        let noise = Normal::new(atom.mean(&x), atom.sigma.sqrt())
            .expect("positive standard deviation");
        out.push(SyntheticSample { x, y: noise.sample(rng) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;

    fn measure(atoms: &[(&[f64], f64)]) -> MixingMeasure {
        MixingMeasure::new(
            atoms.iter().map(|(w, s)| Atom::new(w.to_vec(), *s)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn construction_rejects_bad_measures() {
        assert!(MixingMeasure::new(vec![]).is_err());
        assert!(MixingMeasure::new(vec![Atom::new(vec![1.0], 1.0)]).is_err());
        assert!(MixingMeasure::new(vec![Atom::new(vec![1.0, 0.0], 0.0)]).is_err());
        assert!(MixingMeasure::new(vec![
            Atom::new(vec![1.0, 0.0], 1.0),
            Atom::new(vec![1.0, 0.0], 1.0),
        ])
        .is_err());
        assert!(MixingMeasure::new(vec![
            Atom::new(vec![1.0, 0.0], 1.0),
            Atom::new(vec![1.0, 0.0, 2.0], 1.0),
        ])
        .is_err());
    }

    #[test]
    fn full_k_gating_is_a_plain_softmax_of_score_magnitudes() {
        let g = measure(&[(&[1.0, 0.5], 0.2), (&[-2.0, 0.0], 0.4), (&[0.3, -1.0], 1.0)]);
        let x = [0.7];
        let probs = gating_probs(&x, &g, 3).unwrap();
        let scores: Vec<f64> = g.atoms.iter().map(|a| a.mean(&x).abs()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (p, s) in probs.iter().zip(&scores) {
            assert!((p - s.exp() / z).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_one_gating_is_one_hot_at_the_largest_magnitude() {
        let g = measure(&[(&[0.0, 1.0], 0.5), (&[0.0, -3.0], 0.5)]);
        let probs = gating_probs(&[0.2], &g, 1).unwrap();
        assert_eq!(probs, vec![0.0, 1.0]);
    }

    #[test]
    fn two_of_three_gating_matches_the_frozen_value() {
        // Scores |g| = (2, 1, 0) at x = 1: softmax over the top two is
        // (e², e¹)/(e² + e¹) = (0.7311, 0.2689), third exactly zero.
        let g = measure(&[(&[0.0, 2.0], 1.0), (&[0.0, 1.0], 1.0), (&[0.0, 0.0], 1.0)]);
        let probs = gating_probs(&[1.0], &g, 2).unwrap();
        assert!((probs[0] - 0.7311).abs() < 5e-5, "got {}", probs[0]);
        assert!((probs[1] - 0.2689).abs() < 5e-5, "got {}", probs[1]);
        assert_eq!(probs[2], 0.0);
    }

    #[test]
    fn density_integrates_to_one_by_quadrature() {
        let mut rng = seeded_stream(42, 2);
        for _ in 0..5 {
            let g = MixingMeasure::new(
                (0..3)
                    .map(|_| {
                        Atom::new(
                            vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                            rng.gen_range(0.1..2.0),
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let x = [rng.gen_range(-1.0..1.0)];
            // Simpson over a range generously covering all component mass.
            let (lo, hi) = (-30.0, 30.0);
            let steps = 6000;
            let h = (hi - lo) / steps as f64;
            let mut integral = 0.0;
            for i in 0..=steps {
                let y = lo + i as f64 * h;
                let w = if i == 0 || i == steps {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                integral += w * density(y, &x, &g, 2).unwrap();
            }
            integral *= h / 3.0;
            assert!((integral - 1.0).abs() < 1e-6, "mass {integral}");
        }
    }

    #[test]
    fn single_atom_density_is_the_gaussian_itself() {
        let g = measure(&[(&[1.5, -0.5], 0.8)]);
        let x = [0.4];
        let mean = 1.5 * 0.4 - 0.5;
        for y in [-2.0f64, 0.0, 0.1, 3.0] {
            let expect = (-(y - mean) * (y - mean) / (2.0 * 0.8)).exp()
                / (2.0 * std::f64::consts::PI * 0.8).sqrt();
            assert!((density(y, &x, &g, 1).unwrap() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn coinciding_means_make_the_density_gating_free() {
        // Two distinct atoms whose expert outputs agree at x = 0 with equal
        // variances: the mixture there is one Gaussian no matter how the
        // gate splits.
        let g = measure(&[(&[1.0, 1.0], 0.6), (&[-1.0, 1.0], 0.6)]);
        let x = [0.0];
        for y in [-1.0, 0.5, 1.0, 2.5] {
            let single = gaussian_pdf(y, 1.0, 0.6);
            assert!((density(y, &x, &g, 1).unwrap() - single).abs() < 1e-14);
            assert!((density(y, &x, &g, 2).unwrap() - single).abs() < 1e-14);
        }
    }

    #[test]
    fn sampler_matches_the_mixture_mean_within_three_standard_errors() {
        // Bias-only atoms make y's law independent of x, so every draw
        // estimates the same mixture mean Σ pᵢ·bᵢ.
        let g = measure(&[(&[0.0, 2.0], 0.3), (&[0.0, -1.0], 0.5)]);
        let probs = gating_probs(&[0.0], &g, 2).unwrap();
        let expect: f64 = probs[0] * 2.0 + probs[1] * (-1.0);
        let mut rng = seeded_stream(7, 3);
        let data = sample_dataset(&g, 2, 100_000, &mut rng).unwrap();
        let mean = data.iter().map(|s| s.y).sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|s| (s.y - mean).powi(2)).sum::<f64>()
            / (data.len() - 1) as f64;
        let se = (var / data.len() as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "mean {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn single_component_sampler_is_gaussian_regression() {
        let g = measure(&[(&[2.0, 0.5], 0.25)]);
        let mut rng = seeded_stream(9, 4);
        let data = sample_dataset(&g, 1, 50_000, &mut rng).unwrap();
        // Residuals y − g(x,W*) should be N(0, 0.25).
        let resid: Vec<f64> = data.iter().map(|s| s.y - g.atoms[0].mean(&s.x)).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / (resid.len() - 1) as f64;
        assert!(mean.abs() < 0.01, "residual mean {mean}");
        assert!((var - 0.25).abs() < 0.01, "residual variance {var}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = measure(&[(&[1.0, 0.0], 0.4), (&[-1.0, 0.2], 0.9)]);
        let a = sample_dataset(&g, 1, 200, &mut seeded_stream(5, 6)).unwrap();
        let b = sample_dataset(&g, 1, 200, &mut seeded_stream(5, 6)).unwrap();
        let c = sample_dataset(&g, 1, 200, &mut seeded_stream(6, 6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
