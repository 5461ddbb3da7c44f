//! Empirical convergence-rate measurement: fit the mixture at a grid of
//! sample sizes, many trials each, and read the rate off the log-log
//! slope of the median losses.
//!
//! The theory predicts both the expected Hellinger distance and the
//! Voronoi parameter loss shrink like `√(log n / n)` under competition
//! gating, i.e. a log-log slope near −1/2 with a logarithmic correction.
//! Trials are embarrassingly parallel: each derives its own RNG streams
//! from (master seed, sample-size index, trial index) so results are
//! bitwise reproducible regardless of scheduling, and medians make the
//! aggregation order-irrelevant.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::rng::seeded_stream;
use crate::stats::{
    hellinger_expected, mle_fit, sample_dataset, voronoi_loss, FitOptions, HellingerOptions,
    MixingMeasure,
};

/// Full experiment description. `fit.seed` is ignored; every trial gets
/// its own derived seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateExperimentConfig {
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub k_top: usize,
    pub fit: FitOptions,
    pub hellinger: HellingerOptions,
    pub seed: u64,
}

impl Default for RateExperimentConfig {
    fn default() -> Self {
        RateExperimentConfig {
            n_grid: vec![100, 316, 1000, 3162, 10000],
            trials: 20,
            k_top: 1,
            fit: FitOptions::default(),
            hellinger: HellingerOptions::default(),
            seed: 0,
        }
    }
}

/// One fitted trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub n: usize,
    pub trial: usize,
    pub loglik: f64,
    pub d: f64,
    pub hellinger: f64,
    pub seconds: f64,
}

/// Median loss per sample size plus the fitted log-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub ns: Vec<usize>,
    pub medians: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

impl RateCurve {
    pub fn new(ns: Vec<usize>, medians: Vec<f64>) -> Result<RateCurve> {
        if ns.len() != medians.len() || ns.len() < 2 {
            return Err(Error::RateExperiment(format!(
                "need at least two grid points, got {} sizes and {} medians",
                ns.len(),
                medians.len()
            )));
        }
        if !ns.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::RateExperiment(format!(
                "sample sizes must be strictly increasing, got {ns:?}"
            )));
        }
        if let Some(bad) = medians.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::RateExperiment(format!(
                "losses must be positive and finite for a log-log fit, got {bad}"
            )));
        }
        let (slope, intercept, slope_stderr) = fit_loglog(&ns, &medians);
        Ok(RateCurve { ns, medians, slope, intercept, slope_stderr })
    }
}

/// Everything the `rates` run produces.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub records: Vec<TrialRecord>,
    pub d_curve: RateCurve,
    pub hellinger_curve: RateCurve,
}

/// Least squares of `ln median` on `ln n`: slope, intercept, and the
/// standard error of the slope (0 when the fit is saturated).
fn fit_loglog(ns: &[usize], medians: &[f64]) -> (f64, f64, f64) {
    let m = ns.len() as f64;
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|v| v.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / m;
    let y_mean = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let stderr = if ns.len() > 2 {
        let rss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
            .sum();
        (rss / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, stderr)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// SplitMix-style mixing of (master seed, grid index, trial) into one
/// trial seed.
fn trial_seed(master: u64, n_index: usize, trial: usize) -> u64 {
    let mut z = master
        ^ (n_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trial as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_trial(
    g_star: &MixingMeasure,
    cfg: &RateExperimentConfig,
    n_index: usize,
    trial: usize,
) -> Result<TrialRecord> {
    let n = cfg.n_grid[n_index];
    let seed = trial_seed(cfg.seed, n_index, trial);
    let mut data_rng = seeded_stream(seed, 0);
    let data = sample_dataset(g_star, cfg.k_top, n, &mut data_rng)?;
    let started = Instant::now();
    let fit_opts = FitOptions { seed, ..cfg.fit.clone() };
    let fit = mle_fit(&data, g_star.k(), cfg.k_top, &fit_opts)?;
    let d = voronoi_loss(&fit.measure, g_star, cfg.k_top)?;
    let mut h_rng = seeded_stream(seed, 1);
    let hellinger =
        hellinger_expected(&fit.measure, g_star, cfg.k_top, &cfg.hellinger, &mut h_rng)?;
    Ok(TrialRecord {
        n,
        trial,
        loglik: fit.loglik,
        d,
        hellinger,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Group trial outcomes, reject sample sizes where fewer than half the
/// trials survived, and fit both rate curves.
fn aggregate(
    outcomes: Vec<(usize, Result<TrialRecord>)>,
    n_grid: &[usize],
    trials: usize,
) -> Result<RateReport> {
    let mut records = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    let mut per_n_success = vec![0usize; n_grid.len()];
    for (n_index, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                per_n_success[n_index] += 1;
                records.push(r);
            }
            Err(e) => errors.push(format!("n={}: {e}", n_grid[n_index])),
        }
    }
    for (i, &ok) in per_n_success.iter().enumerate() {
        if ok * 2 < trials {
            return Err(Error::RateExperiment(format!(
                "only {ok} of {trials} trials succeeded at n={}{}",
                n_grid[i],
                if errors.is_empty() {
                    String::new()
                } else {
                    format!(" (first failure: {})", errors[0])
                }
            )));
        }
    }
    records.sort_by_key(|r| (r.n, r.trial));

    let collect_medians = |pick: fn(&TrialRecord) -> f64| -> Vec<f64> {
        n_grid
            .iter()
            .map(|&n| {
                let mut vals: Vec<f64> =
                    records.iter().filter(|r| r.n == n).map(pick).collect();
                median(&mut vals)
            })
            .collect()
    };
    let d_curve = RateCurve::new(n_grid.to_vec(), collect_medians(|r| r.d))?;
    let hellinger_curve = RateCurve::new(n_grid.to_vec(), collect_medians(|r| r.hellinger))?;
    Ok(RateReport { records, d_curve, hellinger_curve })
}

/// Run the full grid, in parallel over (sample size, trial) pairs.
pub fn rate_experiment(
    g_star: &MixingMeasure,
    cfg: &RateExperimentConfig,
) -> Result<RateReport> {
    if cfg.trials == 0 {
        return Err(Error::RateExperiment("trials must be at least 1".to_string()));
    }
    if cfg.n_grid.len() < 2 || !cfg.n_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::RateExperiment(format!(
            "n_grid must be at least two strictly increasing sizes, got {:?}",
            cfg.n_grid
        )));
    }
    g_star.validate_in(&cfg.fit.theta)?;

    let pairs: Vec<(usize, usize)> = (0..cfg.n_grid.len())
        .flat_map(|ni| (0..cfg.trials).map(move |t| (ni, t)))
        .collect();
    let outcomes: Vec<(usize, Result<TrialRecord>)> = pairs
        .par_iter()
        .map(|&(ni, t)| (ni, run_trial(g_star, cfg, ni, t)))
        .collect();
    aggregate(outcomes, &cfg.n_grid, cfg.trials)
}

/// Write the per-trial CSV: `n,trial,loglik,D,hellinger,seconds`.
pub fn write_rates_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "n,trial,loglik,D,hellinger,seconds")?;
    for r in records {
        writeln!(
            file,
            "{},{},{},{},{},{:.3}",
            r.n, r.trial, r.loglik, r.d, r.hellinger, r.seconds
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Summary bundle for the run: both fitted slopes with two-standard-error
/// bands, plus the medians behind them.
pub fn summary_json(report: &RateReport) -> serde_json::Value {
    let curve = |c: &RateCurve| {
        json!({
            "slope": c.slope,
            "intercept": c.intercept,
            "slope_stderr": c.slope_stderr,
            "slope_band": [c.slope - 2.0 * c.slope_stderr, c.slope + 2.0 * c.slope_stderr],
            "n": c.ns,
            "median": c.medians,
        })
    };
    json!({
        "trials_per_n": report.records.len() / report.d_curve.ns.len().max(1),
        "voronoi": curve(&report.d_curve),
        "hellinger": curve(&report.hellinger_curve),
    })
}
