//! Maximum-likelihood fitting of the competition-gated mixture by
//! multi-start projected gradient ascent with gating annealing.
//!
//! EM is the textbook fitter for mixtures, but the TopK gate makes the
//! component responsibilities non-smooth functions of the parameters, so
//! this module ascends the log-likelihood directly on the autodiff tape.
//! Hard gating has a blind spot, though: the gradient treats each
//! sample's winning expert as fixed (the argmax indicator has zero
//! derivative almost everywhere), so plain ascent converges to
//! partition-stationary points — every atom fits its current region
//! perfectly while the region boundaries themselves sit far from the
//! optimum. The fitter therefore anneals: early phases optimize a
//! softened objective whose gate is a full softmax over `β·affinity`, so
//! every atom feels every sample and responsibilities can reorganize;
//! `β` climbs through the `anneal` ladder, and the final phase switches
//! to the real TopK-masked objective. Variances are optimized as
//! `σ² = exp(ρ)` to stay positive, every accepted step is projected back
//! into the compact box Θ, a backtracking line search only ever accepts
//! non-decreasing likelihood values, and random restarts take care of
//! the local maxima that survive annealing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_stream;
use crate::routing::topk_indices;
use crate::stats::{Atom, MixingMeasure, SyntheticSample, ThetaBox};
use crate::tensor::{NodeId, Tape};

/// Fitting knobs. `seed` drives restart initialization only; the data is
/// whatever the caller passes in. `anneal` lists the soft-gating inverse
/// temperatures visited before the hard TopK phase; every phase gets up
/// to `max_iters` iterations with early exit on stagnation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub init_lr: f64,
    pub anneal: Vec<f64>,
    pub theta: ThetaBox,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 16,
            max_iters: 200,
            init_lr: 0.5,
            anneal: vec![0.25, 1.0, 4.0],
            theta: ThetaBox::default(),
            seed: 0,
        }
    }
}

/// A finished fit: the measure, its mean log-likelihood on the data, and
/// the accepted-likelihood trace of the winning ascent (non-decreasing by
/// construction).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub loglik: f64,
    pub trace: Vec<f64>,
}

/// Flat parameter block for one candidate: `w` is `[k*, q]` row-major,
/// `rho[i] = ln σ_i`.
#[derive(Debug, Clone)]
struct Candidate {
    w: Vec<f64>,
    rho: Vec<f64>,
}

impl Candidate {
    fn project(&mut self, theta: &ThetaBox) {
        for w in &mut self.w {
            *w = w.clamp(-theta.w_abs, theta.w_abs);
        }
        let (lo, hi) = (theta.sigma_min.ln(), theta.sigma_max.ln());
        for r in &mut self.rho {
            *r = r.clamp(lo, hi);
        }
    }

    fn stepped(&self, gw: &[f64], grho: &[f64], lr: f64, theta: &ThetaBox) -> Candidate {
        let mut next = Candidate {
            w: self.w.iter().zip(gw).map(|(w, g)| w + lr * g).collect(),
            rho: self.rho.iter().zip(grho).map(|(r, g)| r + lr * g).collect(),
        };
        next.project(theta);
        next
    }

    fn into_measure(self, k_star: usize) -> Result<MixingMeasure> {
        let q = self.w.len() / k_star;
        MixingMeasure::new(
            (0..k_star)
                .map(|i| Atom::new(self.w[i * q..(i + 1) * q].to_vec(), self.rho[i].exp()))
                .collect(),
        )
    }
}

/// `ln Σ_i exp(A_ij)` per row via the detached-max trick: the row maxima
/// enter as constants (a constant shift has zero gradient), so the
/// gradient of the result is the correct softmax-weighted one even with
/// `-inf` entries in `A`.
fn lse_rows(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let shape = tape.shape(a).to_vec();
    let (m, k) = (shape[0], shape[1]);
    let maxima: Vec<f64> = (0..m)
        .map(|i| tape.data(a)[i * k..(i + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let max_full: Vec<f64> = maxima.iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect();
    let max_mat = tape.constant(max_full, vec![m, k])?;
    let shifted = tape.sub(a, max_mat)?;
    let e = tape.exp(shifted);
    let sums = tape.row_sum(e)?;
    let ln_sums = tape.ln(sums);
    let max_vec = tape.constant(maxima, vec![m])?;
    tape.add(ln_sums, max_vec)
}

/// Build the mean log-likelihood of the dataset as a tape scalar, given
/// leaves for `W` (`[k*, q]`) and `ρ` (`[k*]`). Per sample,
/// `ln p = LSE_i(masked_i + ln N_i) − LSE_i(masked_i)` where `masked` is
/// the TopK-masked score matrix — writing the gate's log-probabilities
/// this way avoids ever taking `ln 0`.
fn loglik_graph(
    tape: &mut Tape,
    design: NodeId,
    y_mat: NodeId,
    w: NodeId,
    rho: NodeId,
    k_top: usize,
) -> Result<NodeId> {
    let w_t = tape.transpose(w)?;
    let means = tape.matmul(design, w_t)?;
    let scores = tape.abs(means);

    let shape = tape.shape(scores).to_vec();
    let (m, k) = (shape[0], shape[1]);
    let mut mask = vec![true; m * k];
    for i in 0..m {
        for j in topk_indices(&tape.data(scores)[i * k..(i + 1) * k], k_top) {
            mask[i * k + j] = false;
        }
    }
    let masked = tape.masked_fill(scores, &mask)?;

    let diff = tape.sub(y_mat, means)?;
    let sq = tape.mul(diff, diff)?;
    let sigma = tape.exp(rho);
    let two_sigma = tape.scale(sigma, 2.0);
    let quad = tape.div_cols(sq, two_sigma)?;
    let neg_quad = tape.scale(quad, -1.0);
    let ln_2pi = tape.constant(vec![(2.0 * std::f64::consts::PI).ln(); k], vec![k])?;
    let ln_norm = tape.add(rho, ln_2pi)?;
    let neg_half_ln_norm = tape.scale(ln_norm, -0.5);
    let ln_gauss = tape.add_bias(neg_quad, neg_half_ln_norm)?;

    let joint = tape.add(masked, ln_gauss)?;
    let lse_joint = lse_rows(tape, joint)?;
    let lse_gate = lse_rows(tape, masked)?;
    let per_sample = tape.sub(lse_joint, lse_gate)?;
    Ok(tape.mean(per_sample))
}

/// Evaluate mean log-likelihood at a candidate; with `with_grad`, also its
/// gradient in (W, ρ).
fn evaluate(
    design_data: &(Vec<f64>, usize, usize),
    y_col: &[f64],
    cand: &Candidate,
    k_star: usize,
    k_top: usize,
    with_grad: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>)> {
    let (design_flat, n, q) = design_data;
    let mut tape = Tape::new();
    let design = tape.constant(design_flat.clone(), vec![*n, *q])?;
    let y_full: Vec<f64> =
        y_col.iter().flat_map(|&v| std::iter::repeat(v).take(k_star)).collect();
    let y_mat = tape.constant(y_full, vec![*n, k_star])?;
    let w = tape.leaf(cand.w.clone(), vec![k_star, *q], with_grad)?;
    let rho = tape.leaf(cand.rho.clone(), vec![k_star], with_grad)?;
    let ll = loglik_graph(&mut tape, design, y_mat, w, rho, k_top)?;
    let value = tape.value(ll);
    if !with_grad {
        return Ok((value, None));
    }
    tape.backward(ll)?;
    let gw = tape.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; cand.w.len()]);
    let grho =
        tape.grad(rho).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; cand.rho.len()]);
    Ok((value, Some((gw, grho))))
}

/// Projected gradient ascent from an explicit starting measure. Exposed
/// for warm starts; [`mle_fit`] drives it from random initializations.
pub fn refine(
    data: &[SyntheticSample],
    init: &MixingMeasure,
    k_top: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::Fit("cannot fit an empty dataset".to_string()));
    }
    let d = data[0].x.len();
    if init.dim() != d {
        return Err(Error::Fit(format!(
            "measure dimension {} does not match data dimension {d}",
            init.dim()
        )));
    }
    let k_star = init.k();
    let q = d + 1;
    let n = data.len();
    let mut design_flat = Vec::with_capacity(n * q);
    for s in data {
        design_flat.extend_from_slice(&s.x);
        design_flat.push(1.0);
    }
    let design = (design_flat, n, q);
    let y_col: Vec<f64> = data.iter().map(|s| s.y).collect();

    let mut cand = Candidate {
        w: init.atoms.iter().flat_map(|a| a.w.iter().copied()).collect(),
        rho: init.atoms.iter().map(|a| a.sigma.ln()).collect(),
    };
    cand.project(&opts.theta);

    let (mut ll, _) = evaluate(&design, &y_col, &cand, k_star, k_top, false)?;
    if !ll.is_finite() {
        return Err(Error::Fit(format!("initial log-likelihood is {ll}")));
    }
    let mut trace = vec![ll];
    let mut lr = opts.init_lr;
    let mut stagnant = 0;
    for _ in 0..opts.max_iters {
        let (_, grads) = evaluate(&design, &y_col, &cand, k_star, k_top, true)?;
        let (gw, grho) = grads.expect("gradient requested");
        let mut accepted = None;
        while lr >= 1e-12 {
            let next = cand.stepped(&gw, &grho, lr, &opts.theta);
            let (next_ll, _) = evaluate(&design, &y_col, &next, k_star, k_top, false)?;
            if next_ll.is_finite() && next_ll >= ll {
                accepted = Some((next, next_ll));
                break;
            }
            lr *= 0.5;
        }
        let Some((next, next_ll)) = accepted else { break };
        let gain = next_ll - ll;
        cand = next;
        ll = next_ll;
        trace.push(ll);
        lr = (lr * 1.5).min(opts.init_lr * 64.0);
        if gain < 1e-10 * (1.0 + ll.abs()) {
            stagnant += 1;
            if stagnant >= 3 {
                break;
            }
        } else {
            stagnant = 0;
        }
    }
    Ok(FitResult { measure: cand.into_measure(k_star)?, loglik: ll, trace })
}

/// Draw a random measure inside Θ.
fn random_init(
    k_star: usize,
    q: usize,
    theta: &ThetaBox,
    rng: &mut ChaCha8Rng,
) -> MixingMeasure {
    loop {
        let atoms: Vec<Atom> = (0..k_star)
            .map(|_| {
                Atom::new(
                    (0..q).map(|_| rng.gen_range(-theta.w_abs..theta.w_abs)).collect(),
                    rng.gen_range(theta.sigma_min..theta.sigma_max),
                )
            })
            .collect();
        if let Ok(m) = MixingMeasure::new(atoms) {
            return m;
        }
    }
}

/// Fit a k*-atom measure by the best of `opts.restarts` independent
/// ascents. Restarts whose likelihood goes non-finite are discarded; if
/// every restart fails, the fit fails.
pub fn mle_fit(
    data: &[SyntheticSample],
    k_star: usize,
    k_top: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    if k_star == 0 {
        return Err(Error::Fit("k* must be at least 1".to_string()));
    }
    if data.is_empty() {
        return Err(Error::Fit("cannot fit an empty dataset".to_string()));
    }
    let q = data[0].x.len() + 1;
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for restart in 0..opts.restarts.max(1) {
        let mut rng = seeded_stream(opts.seed, 9000 + restart as u64);
        let init = random_init(k_star, q, &opts.theta, &mut rng);
        match refine(data, &init, k_top, opts) {
            Ok(result) => {
                if best.as_ref().map_or(true, |b| result.loglik > b.loglik) {
                    best = Some(result);
                }
            }
            Err(e) => failures.push(format!("restart {restart}: {e}")),
        }
    }
    best.ok_or_else(|| {
        Error::Fit(format!("all {} restarts failed: {}", opts.restarts, failures.join("; ")))
    })
}
