//! The unified training loop behind all five algorithms.
//!
//! Every algorithm shares one step shape: draw a batch, pick each SMoE
//! layer's execution mode, run the forward, backpropagate the task loss
//! (plus, for scheduled layers, the router-distillation loss against the
//! detached competition outcome), clip, and take one Adam step at
//! `base_lr/√t`. The algorithms differ only in the router family they
//! instantiate, whether layers are ever scheduled into competition mode
//! (the per-layer λ coin flips), and whether/when router parameters are
//! frozen (fixed-random at init, stablemoe after its first phase).
//!
//! On a scheduled layer the output combination uses the competition gate,
//! so the router's weights do not appear in the task-loss graph at all:
//! its entire gradient there comes from the distillation term, and the
//! experts' gradients are independent of the balance factor α (which
//! scales only the reported router-objective diagnostic).

pub mod adam;
mod finetune;

pub use adam::Adam;
pub use finetune::{finetune, FinetuneConfig, FinetuneReport};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsSink, RoutingRecordWriter};
use crate::model::{LayerMode, Model};
use crate::rng::{layer_stream, seeded_stream, STREAM_DATA};
use crate::routing;
use crate::tensor::Tape;

/// Loss values and instrumentation of one optimization step.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub step: u64,
    pub nll: f64,
    /// `nll / ln 2`, exactly.
    pub bpc: f64,
    /// Per SMoE block (block order): the distillation loss when the block
    /// was scheduled this step.
    pub router_loss: Vec<Option<f64>>,
    /// α·nll — the task-loss share of the scheduled routers' objective,
    /// reported for log inspection (it cannot alter any gradient; see the
    /// module docs).
    pub alpha_nll: f64,
    /// Mean entropy of the combination weights actually used, per block.
    pub entropy: Vec<f64>,
    /// Blocks that ran in competition mode (Λ(t)).
    pub scheduled: Vec<usize>,
    /// Expert evaluations this step: tokens×K per routed block plus
    /// tokens×N per scheduled block.
    pub expert_calls: u64,
    pub wall_ms: f64,
}

/// Evaluation summary over one corpus split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean per-token negative log-likelihood (natural log).
    pub nll: f64,
    /// `nll / ln 2`.
    pub bpc: f64,
    /// `exp(nll)`.
    pub perplexity: f64,
    pub tokens: usize,
    /// Mean routing entropy per SMoE block over the evaluated windows.
    pub entropy: Vec<f64>,
}

/// Everything a finished run reports back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_valid: EvalReport,
    pub test: EvalReport,
    /// Lowest-validation-loss checkpoint seen: (step, valid nll).
    pub best_valid: Option<(u64, f64)>,
    pub total_expert_calls: u64,
    /// Λ(t) per step, in step order.
    pub schedule_log: Vec<Vec<usize>>,
    pub wall_ms: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Training driver: model, optimizer state, RNG streams, and the corpus.
///
/// Construction does not re-validate the config — the CLI/config loader
/// does that — which deliberately leaves the λ=0 reduction reachable for
/// equivalence tests even though the user-facing schema requires λ > 0
/// for the competition schedule.
pub struct Trainer {
    pub model: Model,
    pub cfg: RunConfig,
    pub adam: Adam,
    corpus: Corpus,
    data_rng: ChaCha8Rng,
    /// One independent flip stream per SMoE block.
    flip_rngs: Vec<(usize, ChaCha8Rng)>,
    total_calls: u64,
    schedule_log: Vec<Vec<usize>>,
    stablemoe_frozen: bool,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, corpus: Corpus) -> Result<Trainer> {
        let mut model_cfg = cfg.model.clone();
        if model_cfg.vocab_size == 0 {
            model_cfg.vocab_size = corpus.vocab_size();
        }
        if model_cfg.router.kind.is_none() {
            model_cfg.router.kind = Some(cfg.trainer.algorithm.default_router_kind());
        }
        let seed = cfg.trainer.seed;
        let model = Model::init(&model_cfg, seed)?;
        if corpus.split_ids(Split::Train).len() <= cfg.trainer.context {
            return Err(Error::Corpus(format!(
                "training split of {} ids cannot fill context {}",
                corpus.split_ids(Split::Train).len(),
                cfg.trainer.context
            )));
        }
        let flip_rngs = model_cfg
            .smoe_blocks()
            .into_iter()
            .map(|b| (b, seeded_stream(seed, layer_stream(b))))
            .collect();
        let mut cfg = cfg.clone();
        cfg.model = model_cfg;
        Ok(Trainer {
            adam: Adam::new(cfg.trainer.base_lr),
            model,
            cfg,
            corpus,
            data_rng: seeded_stream(seed, STREAM_DATA),
            flip_rngs,
            total_calls: 0,
            schedule_log: Vec::new(),
            stablemoe_frozen: false,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn total_expert_calls(&self) -> u64 {
        self.total_calls
    }

    pub fn schedule_log(&self) -> &[Vec<usize>] {
        &self.schedule_log
    }

    /// Λ(t): one independent coin per SMoE block from that block's own
    /// stream. Algorithms without the competition schedule never flip.
    fn coin_flips(&mut self) -> Vec<usize> {
        if !self.cfg.trainer.algorithm.uses_schedule() {
            return Vec::new();
        }
        let lambda = self.cfg.trainer.lambda;
        self.flip_rngs
            .iter_mut()
            .filter_map(|(b, rng)| rng.gen_bool(lambda).then_some(*b))
            .collect()
    }

    /// StableMoE trains its (linear) router only during the first
    /// `phase1_fraction` of steps; entering phase 2 freezes it for good.
    fn maybe_enter_stablemoe_phase2(&mut self, step: u64) {
        use crate::config::Algorithm;
        if self.cfg.trainer.algorithm != Algorithm::Stablemoe || self.stablemoe_frozen {
            return;
        }
        let phase1_steps =
            (self.cfg.trainer.phase1_fraction * self.cfg.trainer.steps as f64).floor() as u64;
        if step > phase1_steps {
            self.model.params.freeze_matching(|name| name.contains(".smoe.router."));
            self.stablemoe_frozen = true;
        }
    }

    /// Router parameters to exclude from the Adam update this step. Under
    /// the strict schedule, a router learns only on its own scheduled
    /// steps — on all other steps its parameters (and moments) stay put.
    fn strict_skip_set(&self, scheduled: &[usize]) -> BTreeSet<String> {
        if !self.cfg.trainer.strict_router_schedule
            || !self.cfg.trainer.algorithm.uses_schedule()
        {
            return BTreeSet::new();
        }
        self.model
            .router_param_names()
            .into_iter()
            .filter(|name| {
                self.cfg
                    .model
                    .smoe_blocks()
                    .iter()
                    .any(|b| !scheduled.contains(b) && name.starts_with(&format!("block{b}.")))
            })
            .collect()
    }

    /// One optimization step: flips, forward, losses, backward, clip,
    /// Adam. A non-finite loss aborts with the offending layer named.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let t0 = Instant::now();
        let step = self.adam.t + 1;
        self.maybe_enter_stablemoe_phase2(step);
        let scheduled = self.coin_flips();

        let context = self.cfg.trainer.context;
        let batch_size = self.cfg.trainer.batch_size;
        let batch = data::sample_batch(
            self.corpus.split_ids(Split::Train),
            context,
            batch_size,
            &mut self.data_rng,
        )?;

        let modes: Vec<LayerMode> = (0..self.cfg.model.n_layers)
            .map(|l| {
                if scheduled.contains(&l) {
                    LayerMode::Competition
                } else {
                    LayerMode::Routed
                }
            })
            .collect();

        let mut tape = Tape::new();
        let binds = self.model.params.bind(&mut tape)?;
        let out = self.model.forward_batch(&mut tape, &binds, &batch.inputs, &modes)?;
        let nll = tape.cross_entropy_nll(out.logits, &batch.targets)?;
        let nll_value = tape.value(nll);
        if !nll_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("task loss is {nll_value} (scheduled blocks: {scheduled:?})"),
            });
        }

        let mut total = nll;
        let mut router_loss = vec![None; out.layers.len()];
        for (slot, trace) in out.layers.iter().enumerate() {
            if let Some(comp) = trace.competition_scores {
                let lr_node = routing::router_loss(
                    &mut tape,
                    trace.router_scores,
                    comp,
                    self.cfg.model.top_k,
                )?;
                let value = tape.value(lr_node);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!("router loss at block {} is {value}", trace.block),
                    });
                }
                router_loss[slot] = Some(value);
                total = tape.add(total, lr_node)?;
            }
        }

        tape.backward(total)?;
        let mut grads = binds.gradients(&tape);
        if let Some(max_norm) = self.cfg.trainer.grad_clip {
            Adam::clip_global_norm(&mut grads, max_norm);
        }
        let skip = self.strict_skip_set(&scheduled);
        self.adam.step(&mut self.model.params, &grads, &skip);

        let n = self.cfg.model.n_experts;
        let entropy: Vec<f64> = out
            .layers
            .iter()
            .map(|trace| routing::routing_entropy(tape.data(trace.gate_weights), n))
            .collect();
        let expert_calls: u64 = out.layers.iter().map(|t| t.expert_calls).sum();
        self.total_calls += expert_calls;
        self.schedule_log.push(scheduled.clone());

        let alpha = self.cfg.trainer.resolved_alpha(self.cfg.model.layout);
        Ok(LossBreakdown {
            step,
            nll: nll_value,
            bpc: nll_value / std::f64::consts::LN_2,
            router_loss,
            alpha_nll: if scheduled.is_empty() { 0.0 } else { alpha * nll_value },
            entropy,
            scheduled,
            expert_calls,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Routed-mode gate snapshot on a fixed validation probe batch; feeds
    /// the routing-records CSV at each evaluation boundary.
    fn probe_routing(&self, step: u64, writer: &mut RoutingRecordWriter) -> Result<()> {
        let ids = self.corpus.split_ids(Split::Valid);
        let context = self.cfg.trainer.context.min(ids.len().saturating_sub(1));
        if context == 0 {
            return Ok(());
        }
        let windows = data::eval_windows(ids, context);
        let take = windows.len().min(self.cfg.trainer.batch_size).max(1);
        let inputs: Vec<Vec<usize>> =
            windows.into_iter().take(take).map(|(i, _)| i).collect();
        // Probe windows may differ in length; run them one at a time.
        let modes = vec![LayerMode::Routed; self.cfg.model.n_layers];
        let n = self.cfg.model.n_experts;
        for input in inputs {
            let mut tape = Tape::new();
            let binds = self.model.params.bind(&mut tape)?;
            let out = self.model.forward_batch(&mut tape, &binds, &[input], &modes)?;
            for trace in &out.layers {
                writer.append_layer(
                    step,
                    trace.block,
                    tape.data(trace.gate_weights),
                    n,
                    &trace.selected,
                )?;
            }
        }
        Ok(())
    }

    /// Run the configured number of steps. With an output directory this
    /// writes `metrics.csv`, `records.csv`, and `best.ckpt`/`final.ckpt`;
    /// without one it trains silently (tests, equivalence checks).
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let started = Instant::now();
        let smoe_blocks = self.cfg.model.smoe_blocks();
        let mut sinks = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some((
                    MetricsSink::create(&dir.join("metrics.csv"), &smoe_blocks)?,
                    RoutingRecordWriter::create(
                        &dir.join("records.csv"),
                        self.cfg.trainer.algorithm.name(),
                    )?,
                ))
            }
            None => None,
        };

        let steps = self.cfg.trainer.steps;
        let mut best: Option<(u64, f64)> = None;
        let mut best_path = None;
        for step in 1..=steps {
            let b = self.train_step()?;
            if let Some((metrics, _)) = sinks.as_mut() {
                metrics.append(&MetricsRow {
                    step,
                    split: Split::Train,
                    nll: b.nll,
                    bpc: b.bpc,
                    router_loss: b.router_loss.clone(),
                    entropy: b.entropy.iter().map(|&h| Some(h)).collect(),
                    expert_calls: b.expert_calls,
                    wall_ms: b.wall_ms,
                })?;
            }

            if step % self.cfg.trainer.eval_interval == 0 || step == steps {
                let report = evaluate(
                    &self.model,
                    &self.corpus,
                    Split::Valid,
                    self.cfg.trainer.context,
                    self.cfg.trainer.batch_size,
                )?;
                if let Some((metrics, records)) = sinks.as_mut() {
                    metrics.append(&MetricsRow {
                        step,
                        split: Split::Valid,
                        nll: report.nll,
                        bpc: report.bpc,
                        router_loss: vec![None; smoe_blocks.len()],
                        entropy: report.entropy.iter().map(|&h| Some(h)).collect(),
                        expert_calls: 0,
                        wall_ms: 0.0,
                    })?;
                    self.probe_routing(step, records)?;
                }
                if best.map_or(true, |(_, nll)| report.nll < nll) {
                    best = Some((step, report.nll));
                    if let Some(dir) = out_dir {
                        let path = dir.join("best.ckpt");
                        checkpoint::save(
                            &path,
                            &self.model,
                            Some(self.corpus.vocab_bytes()),
                            step,
                        )?;
                        best_path = Some(path);
                    }
                }
            }
        }

        let final_path = match out_dir {
            Some(dir) => {
                let path = dir.join("final.ckpt");
                checkpoint::save(&path, &self.model, Some(self.corpus.vocab_bytes()), steps)?;
                Some(path)
            }
            None => None,
        };
        let final_valid = evaluate(
            &self.model,
            &self.corpus,
            Split::Valid,
            self.cfg.trainer.context,
            self.cfg.trainer.batch_size,
        )?;
        let test = evaluate(
            &self.model,
            &self.corpus,
            Split::Test,
            self.cfg.trainer.context,
            self.cfg.trainer.batch_size,
        )?;
        Ok(TrainOutcome {
            steps,
            final_valid,
            test,
            best_valid: best,
            total_expert_calls: self.total_calls,
            schedule_log: self.schedule_log.clone(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            best_checkpoint: best_path,
            final_checkpoint: final_path,
        })
    }
}

/// Mean per-token NLL over non-overlapping context windows of a split,
/// with the model in routed (inference) mode.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    context: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let ids = corpus.split_ids(split);
    if ids.len() < 2 {
        return Err(Error::Corpus(format!(
            "{} split has {} ids — nothing to evaluate",
            split.name(),
            ids.len()
        )));
    }
    let windows = data::eval_windows(ids, context);
    let modes = vec![LayerMode::Routed; model.config.n_layers];
    let smoe_count = model.config.smoe_blocks().len();
    let n = model.config.n_experts;

    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    let mut entropy_sum = vec![0.0; smoe_count];
    let mut entropy_rows = 0usize;
    let mut process = |model: &Model, inputs: &[Vec<usize>], targets: Vec<usize>| -> Result<()> {
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape)?;
        let out = model.forward_batch(&mut tape, &binds, inputs, &modes)?;
        let nll = tape.cross_entropy_nll(out.logits, &targets)?;
        let rows = targets.len();
        nll_sum += tape.value(nll) * rows as f64;
        tokens += rows;
        for (slot, trace) in out.layers.iter().enumerate() {
            entropy_sum[slot] += routing::routing_entropy(tape.data(trace.gate_weights), n)
                * rows as f64;
        }
        entropy_rows += rows;
        Ok(())
    };

    // Full-length windows batch together; the one short tail (if any) runs
    // alone.
    let full: Vec<&(Vec<usize>, Vec<usize>)> =
        windows.iter().filter(|(i, _)| i.len() == context).collect();
    for chunk in full.chunks(batch_size.max(1)) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        process(model, &inputs, targets)?;
    }
    for (input, targets) in windows.iter().filter(|(i, _)| i.len() != context) {
        process(model, &[input.clone()], targets.clone())?;
    }

    if tokens == 0 {
        return Err(Error::Corpus(format!("{} split produced no evaluation windows", split.name())));
    }
    let nll = nll_sum / tokens as f64;
    Ok(EvalReport {
        nll,
        bpc: nll / std::f64::consts::LN_2,
        perplexity: nll.exp(),
        tokens,
        entropy: entropy_sum.iter().map(|s| s / entropy_rows.max(1) as f64).collect(),
    })
}
