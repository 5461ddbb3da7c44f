//! Finite-difference gradient verification.
//!
//! Every differentiable tape operation is checked against central
//! differences on seeded random inputs, and a two-block model (one routed
//! layer, one competition layer, task loss plus distillation loss) is
//! checked end to end over all of its parameters. Relative error is
//! measured against `max(1, |analytic|, |numeric|)`, so near-zero gradients
//! do not produce false alarms while genuinely wrong gradients of any
//! useful magnitude are caught.

use rand::Rng;

use crate::error::Result;
use crate::model::{LayerMode, Model, ModelConfig};
use crate::rng::seeded_stream;
use crate::routing;
use crate::tensor::{NodeId, Tape};

/// Central-difference step. With 64-bit floats the truncation plus
/// round-off error floor is around 1e-10, far below both tolerances.
pub const FD_STEP: f64 = 1e-5;
/// Per-op acceptance tolerance.
pub const OP_TOL: f64 = 1e-4;
/// End-to-end model tolerance.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

type LossBuilder<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Compare autodiff gradients of a scalar-valued graph against central
/// finite differences over every coordinate of every input.
fn check_graph(inputs: &[(Vec<f64>, Vec<usize>)], build: LossBuilder) -> Result<f64> {
    let eval = |perturbed: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = perturbed
            .iter()
            .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.value(loss))
    };

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| match tape.grad(l) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.data(l).len()],
        })
        .collect();

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for c in 0..inputs[i].0.len() {
            let mut plus = inputs.to_vec();
            plus[i].0[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].0[c] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][c], numeric));
        }
    }
    Ok(worst)
}

/// Random tensor with entries in `[lo, hi]`.
fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    ((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape.to_vec())
}

/// Random tensor with magnitudes in `[0.2, 1]` — keeps relu/abs inputs away
/// from their kinks so central differences stay valid.
fn rand_tensor_off_kink(rng: &mut impl Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    (
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        shape.to_vec(),
    )
}

/// Deterministic probe weights so reductions mix output coordinates with
/// distinct factors (a plain sum has gradient blind spots, e.g. softmax).
fn probe(tape: &mut Tape, shape: &[usize]) -> NodeId {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| 0.25 + ((i * 31 + 7) % 13) as f64 / 13.0).collect();
    tape.constant(data, shape.to_vec()).expect("probe shape")
}

/// Reduce an op output to a scalar through the probe weights.
fn probed(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let p = probe(tape, &shape);
    let weighted = tape.mul(out, p)?;
    Ok(tape.sum(weighted))
}

/// Finite-difference check of every differentiable tape op.
pub fn check_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<(Vec<f64>, Vec<usize>)>,
                   build: LossBuilder|
     -> Result<()> {
        let max_rel_err = check_graph(&inputs, build)?;
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err,
            tol: OP_TOL,
        });
        Ok(())
    };
    let mut rng = seeded_stream(seed, 5000);

    run(
        "matmul",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4, 2], -1.0, 1.0)],
        &|t, l| {
            let y = t.matmul(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "transpose",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        &|t, l| {
            let y = t.transpose(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "add",
        vec![rand_tensor(&mut rng, &[2, 5], -1.0, 1.0), rand_tensor(&mut rng, &[2, 5], -1.0, 1.0)],
        &|t, l| {
            let y = t.add(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "sub",
        vec![rand_tensor(&mut rng, &[2, 5], -1.0, 1.0), rand_tensor(&mut rng, &[2, 5], -1.0, 1.0)],
        &|t, l| {
            let y = t.sub(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "mul",
        vec![rand_tensor(&mut rng, &[2, 5], -1.0, 1.0), rand_tensor(&mut rng, &[2, 5], -1.0, 1.0)],
        &|t, l| {
            let y = t.mul(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "add_bias",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4], -1.0, 1.0)],
        &|t, l| {
            let y = t.add_bias(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "scale",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)],
        &|t, l| {
            let y = t.scale(l[0], 1.7);
            probed(t, y)
        },
    )?;
    run("relu", vec![rand_tensor_off_kink(&mut rng, &[2, 6])], &|t, l| {
        let y = t.relu(l[0]);
        probed(t, y)
    })?;
    run("gelu", vec![rand_tensor(&mut rng, &[2, 6], -2.0, 2.0)], &|t, l| {
        let y = t.gelu(l[0]);
        probed(t, y)
    })?;
    run("abs", vec![rand_tensor_off_kink(&mut rng, &[2, 6])], &|t, l| {
        let y = t.abs(l[0]);
        probed(t, y)
    })?;
    run("exp", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], &|t, l| {
        let y = t.exp(l[0]);
        probed(t, y)
    })?;
    run("ln", vec![rand_tensor(&mut rng, &[2, 3], 0.3, 2.0)], &|t, l| {
        let y = t.ln(l[0]);
        probed(t, y)
    })?;
    run("sqrt", vec![rand_tensor(&mut rng, &[2, 3], 0.3, 2.0)], &|t, l| {
        let y = t.sqrt(l[0]);
        probed(t, y)
    })?;
    run("recip", vec![rand_tensor(&mut rng, &[2, 3], 0.5, 2.0)], &|t, l| {
        let y = t.recip(l[0]);
        probed(t, y)
    })?;
    run(
        "softmax_rows",
        vec![rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)],
        &|t, l| {
            let y = t.softmax_rows(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "masked_fill",
        vec![rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)],
        &|t, l| {
            // Masked positions must contribute exactly zero gradient; the
            // finite check runs through the downstream softmax.
            let mask: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
            let m = t.masked_fill(l[0], &mask)?;
            let y = t.softmax_rows(m)?;
            probed(t, y)
        },
    )?;
    run(
        "l2_norm_rows",
        vec![rand_tensor_off_kink(&mut rng, &[3, 4])],
        &|t, l| {
            let y = t.l2_norm_rows(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "normalize_rows",
        vec![rand_tensor_off_kink(&mut rng, &[3, 4])],
        &|t, l| {
            let y = t.normalize_rows(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "layer_norm",
        vec![
            rand_tensor(&mut rng, &[3, 6], -1.0, 1.0),
            rand_tensor(&mut rng, &[6], 0.5, 1.5),
            rand_tensor(&mut rng, &[6], -0.5, 0.5),
        ],
        &|t, l| {
            let y = t.layer_norm(l[0], l[1], l[2], 1e-5)?;
            probed(t, y)
        },
    )?;
    run(
        "cross_entropy_nll",
        vec![rand_tensor(&mut rng, &[4, 7], -2.0, 2.0)],
        &|t, l| t.cross_entropy_nll(l[0], &[3, 0, 6, 2]),
    )?;
    run(
        "gather_rows",
        vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
        &|t, l| {
            let y = t.gather_rows(l[0], &[2, 0, 2, 1])?;
            probed(t, y)
        },
    )?;
    run(
        "scatter_add_rows",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        &|t, l| {
            let y = t.scatter_add_rows(l[0], &[2, 0, 2], 4)?;
            probed(t, y)
        },
    )?;
    run(
        "column",
        vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
        &|t, l| {
            let y = t.column(l[0], 1)?;
            probed(t, y)
        },
    )?;
    run(
        "scale_rows",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[3], -1.0, 1.0)],
        &|t, l| {
            let y = t.scale_rows(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "mul_cols",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4], -1.0, 1.0)],
        &|t, l| {
            let y = t.mul_cols(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "div_cols",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4], 0.5, 2.0)],
        &|t, l| {
            let y = t.div_cols(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "div_scalar",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[1], 0.5, 2.0)],
        &|t, l| {
            let y = t.div_scalar(l[0], l[1])?;
            probed(t, y)
        },
    )?;
    run(
        "row_sum",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        &|t, l| {
            let y = t.row_sum(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "mean_rows",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        &|t, l| {
            let y = t.mean_rows(l[0])?;
            probed(t, y)
        },
    )?;
    run(
        "concat_cols",
        vec![rand_tensor(&mut rng, &[3, 2], -1.0, 1.0), rand_tensor(&mut rng, &[3, 3], -1.0, 1.0)],
        &|t, l| {
            let y = t.concat_cols(&[l[0], l[1]])?;
            probed(t, y)
        },
    )?;
    run(
        "concat_rows",
        vec![rand_tensor(&mut rng, &[2, 4], -1.0, 1.0), rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        &|t, l| {
            let y = t.concat_rows(&[l[0], l[1]])?;
            probed(t, y)
        },
    )?;
    run(
        "slice_cols",
        vec![rand_tensor(&mut rng, &[3, 6], -1.0, 1.0)],
        &|t, l| {
            let y = t.slice_cols(l[0], 1, 4)?;
            probed(t, y)
        },
    )?;
    run("sum", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], &|t, l| {
        Ok(t.sum(l[0]))
    })?;
    run("mean", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], &|t, l| {
        Ok(t.mean(l[0]))
    })?;
    run(
        "mse",
        vec![rand_tensor(&mut rng, &[2, 4], -1.0, 1.0), rand_tensor(&mut rng, &[2, 4], -1.0, 1.0)],
        &|t, l| t.mse(l[0], l[1]),
    )?;
    run(
        "reshape",
        vec![rand_tensor(&mut rng, &[2, 6], -1.0, 1.0)],
        &|t, l| {
            let y = t.reshape(l[0], vec![3, 4])?;
            probed(t, y)
        },
    )?;
    run(
        "gate_weights",
        vec![rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)],
        &|t, l| {
            let g = routing::gate(t, l[0], 2)?;
            probed(t, g.weights)
        },
    )?;

    Ok(reports)
}

/// End-to-end check: a two-block model (block 0 routed, block 1 in
/// competition mode) with task loss plus the distillation loss, finite
/// differences over every parameter.
///
/// The distillation target is a stop-gradient quantity — the router is
/// pulled toward `gate(detach(s_C))` and no gradient flows into the
/// competition scores from that term. A naive finite-difference evaluation
/// would recompute the target under each perturbation and so measure the
/// derivative of a *different* (fully coupled) function. The numeric side
/// therefore reuses the target gate weights captured at the unperturbed
/// point, which is exactly the function the analytic gradient describes.
pub fn check_model(seed: u64) -> Result<CheckReport> {
    let cfg = ModelConfig {
        vocab_size: 11,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_experts: 3,
        top_k: 2,
        context: 8,
        ..ModelConfig::nano()
    };
    let mut model = Model::init(&cfg, seed)?;
    let ids = vec![3usize, 1, 4, 1];
    let targets = vec![1usize, 4, 1, 5];
    let modes = vec![LayerMode::Routed, LayerMode::Competition];

    // Analytic gradients of the production objective, capturing each
    // competition layer's frozen distillation target along the way.
    let mut tape = Tape::new();
    let binds = model.params.bind(&mut tape)?;
    let out = model.forward_batch(&mut tape, &binds, &[ids.clone()], &modes)?;
    let mut frozen_targets: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for layer in &out.layers {
        if let Some(comp) = layer.competition_scores {
            let detached = tape.detach(comp);
            let target_gate = routing::gate(&mut tape, detached, cfg.top_k)?;
            frozen_targets.push((
                tape.data(target_gate.weights).to_vec(),
                tape.shape(target_gate.weights).to_vec(),
            ));
        }
    }
    let nll = tape.cross_entropy_nll(out.logits, &targets)?;
    let mut total = nll;
    for layer in &out.layers {
        if let Some(comp) = layer.competition_scores {
            let lr = routing::router_loss(&mut tape, layer.router_scores, comp, cfg.top_k)?;
            total = tape.add(total, lr)?;
        }
    }
    tape.backward(total)?;
    let analytic = binds.gradients(&tape);

    let loss_value = |model: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape)?;
        let out = model.forward_batch(&mut tape, &binds, &[ids.clone()], &modes)?;
        let nll = tape.cross_entropy_nll(out.logits, &targets)?;
        let mut total = nll;
        let mut frozen = frozen_targets.iter();
        for layer in &out.layers {
            if layer.competition_scores.is_some() {
                let (data, shape) = frozen.next().expect("one frozen target per competition layer");
                let target = tape.constant(data.clone(), shape.clone())?;
                let router_gate = routing::gate(&mut tape, layer.router_scores, cfg.top_k)?;
                let lr = tape.mse(router_gate.weights, target)?;
                total = tape.add(total, lr)?;
            }
        }
        Ok(tape.value(total))
    };

    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let len = model.params.get(&name).unwrap().data.len();
        for c in 0..len {
            let original = model.params.get(&name).unwrap().data[c];
            model.params.get_mut(&name).unwrap().data[c] = original + FD_STEP;
            let plus = loss_value(&model)?;
            model.params.get_mut(&name).unwrap().data[c] = original - FD_STEP;
            let minus = loss_value(&model)?;
            model.params.get_mut(&name).unwrap().data[c] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let ana = analytic.get(&name).map_or(0.0, |g| g[c]);
            worst = worst.max(rel_err(ana, numeric));
        }
    }
    Ok(CheckReport {
        name: "end_to_end_2block".to_string(),
        max_rel_err: worst,
        tol: MODEL_TOL,
    })
}

/// All op checks plus the end-to-end model check.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = check_ops(seed)?;
    reports.push(check_model(seed)?);
    Ok(reports)
}
