//! Frozen-router classification finetuning.
//!
//! Downstream adaptation keeps the routing decisions a pretrained model
//! has settled on: a two-layer classifier head is attached over the
//! mean-pooled final hidden states, the routers (and the rest of the
//! backbone) are frozen, and only the experts plus the new head train on
//! cross-entropy. The `head_only` variant freezes the experts too and is
//! the natural baseline for asking whether expert adaptation buys
//! anything beyond a linear probe of frozen features.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::ClassificationSet;
use crate::error::{Error, Result};
use crate::model::{xavier, LayerMode, Model};
use crate::rng::{seeded_stream, STREAM_DATA, STREAM_INIT};
use crate::tensor::{NodeId, Tape};
use crate::train::Adam;

use rand::Rng;

/// Knobs for one finetuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Hidden width of the classifier's first layer.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Freeze the experts as well, training the classifier head alone.
    #[serde(default)]
    pub head_only: bool,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

fn default_steps() -> u64 {
    300
}
fn default_batch_size() -> usize {
    8
}
fn default_base_lr() -> f64 {
    1e-3
}
fn default_head_hidden() -> usize {
    32
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Accuracies of a finished finetuning run.
#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub steps: u64,
    pub head_only: bool,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn check_compatible(model: &Model, set: &ClassificationSet, which: &str) -> Result<()> {
    let vocab = model.config.vocab_size;
    if let Some(&bad) = set.inputs.iter().flatten().find(|&&id| id >= vocab) {
        return Err(Error::config(
            "finetune",
            format!("{which} set contains token id {bad}, model vocabulary is {vocab}"),
        ));
    }
    if let Some(seq) = set.inputs.iter().find(|s| s.len() > model.config.context) {
        return Err(Error::config(
            "finetune",
            format!(
                "{which} set has windows of {} tokens, model context is {}",
                seq.len(),
                model.config.context
            ),
        ));
    }
    if set.inputs.len() != set.labels.len() || set.inputs.is_empty() {
        return Err(Error::config(
            "finetune",
            format!("{which} set is empty or has mismatched labels"),
        ));
    }
    Ok(())
}

/// Classifier logits for a batch of windows: mean-pool each sequence's
/// final hidden states, then two fully connected layers.
fn head_logits(
    model: &Model,
    tape: &mut Tape,
    binds: &crate::tensor::ParamBindings,
    inputs: &[Vec<usize>],
) -> Result<NodeId> {
    let modes = vec![LayerMode::Routed; model.config.n_layers];
    let out = model.forward_batch(tape, binds, inputs, &modes)?;
    let pooled: Vec<NodeId> = out
        .final_hidden
        .iter()
        .map(|&h| tape.mean_rows(h))
        .collect::<Result<_>>()?;
    let x = tape.concat_rows(&pooled)?;
    let h1 = tape.matmul(x, binds.node("cls.w1"))?;
    let h1 = tape.add_bias(h1, binds.node("cls.b1"))?;
    let h1 = tape.relu(h1);
    let logits = tape.matmul(h1, binds.node("cls.w2"))?;
    tape.add_bias(logits, binds.node("cls.b2"))
}

/// Fraction of windows whose argmax logit matches the label. The model
/// must already carry the classifier head.
pub fn classification_accuracy(
    model: &Model,
    set: &ClassificationSet,
    batch_size: usize,
) -> Result<f64> {
    check_compatible(model, set, "evaluation")?;
    let mut correct = 0usize;
    for (inputs, labels) in set
        .inputs
        .chunks(batch_size.max(1))
        .zip(set.labels.chunks(batch_size.max(1)))
    {
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape)?;
        let logits = head_logits(model, &mut tape, &binds, inputs)?;
        let data = tape.data(logits);
        for (row, &label) in labels.iter().enumerate() {
            let pred = if data[row * 2] >= data[row * 2 + 1] { 0 } else { 1 };
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.inputs.len() as f64)
}

/// Attach a fresh two-layer classifier head, freeze everything except the
/// experts (and with `head_only`, them too), and train on cross-entropy.
///
/// The model is modified in place: it gains the `cls.*` parameters and
/// keeps its finetuned experts, so accuracy can be re-measured afterwards
/// with [`classification_accuracy`].
pub fn finetune(
    model: &mut Model,
    train: &ClassificationSet,
    test: &ClassificationSet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    check_compatible(model, train, "training")?;
    check_compatible(model, test, "test")?;
    if model.params.contains("cls.w1") {
        return Err(Error::config("finetune", "model already carries a classifier head"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.head_hidden == 0 || cfg.base_lr <= 0.0 {
        return Err(Error::config(
            "finetune",
            "steps, batch_size, head_hidden must be >= 1 and base_lr > 0",
        ));
    }

    let d = model.config.d_model;
    let h = cfg.head_hidden;
    let mut init = seeded_stream(cfg.seed, STREAM_INIT);
    model.params.insert("cls.w1", xavier(&mut init, d, h), vec![d, h]);
    model.params.insert("cls.b1", vec![0.0; h], vec![h]);
    model.params.insert("cls.w2", xavier(&mut init, h, 2), vec![h, 2]);
    model.params.insert("cls.b2", vec![0.0; 2], vec![2]);

    let head_only = cfg.head_only;
    model.params.freeze_matching(|name| {
        let is_head = name.starts_with("cls.");
        let is_expert = name.contains(".smoe.expert");
        !(is_head || (is_expert && !head_only))
    });

    let mut adam = Adam::new(cfg.base_lr);
    let mut data_rng = seeded_stream(cfg.seed, STREAM_DATA);
    let no_skip = BTreeSet::new();
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let (inputs, labels): (Vec<Vec<usize>>, Vec<usize>) = (0..cfg.batch_size)
            .map(|_| {
                let i = data_rng.gen_range(0..train.inputs.len());
                (train.inputs[i].clone(), train.labels[i])
            })
            .unzip();
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape)?;
        let logits = head_logits(model, &mut tape, &binds, &inputs)?;
        let loss = tape.cross_entropy_nll(logits, &labels)?;
        let value = tape.value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("finetune classification loss is {value}"),
            });
        }
        final_loss = value;
        tape.backward(loss)?;
        let mut grads = binds.gradients(&tape);
        if let Some(max_norm) = cfg.grad_clip {
            Adam::clip_global_norm(&mut grads, max_norm);
        }
        adam.step(&mut model.params, &grads, &no_skip);
    }

    Ok(FinetuneReport {
        steps: cfg.steps,
        head_only,
        final_loss,
        train_accuracy: classification_accuracy(model, train, cfg.batch_size)?,
        test_accuracy: classification_accuracy(model, test, cfg.batch_size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algorithm;
    use crate::data::{self, Corpus, SplitFractions};
    use crate::model::ModelConfig;

    fn task_fixture(seed: u64) -> (Corpus, ClassificationSet, ClassificationSet) {
        let corpus =
            Corpus::from_bytes(&data::synthetic_text(6_000, 17), SplitFractions::default())
                .unwrap();
        let train = data::classification_set(&corpus, 256, 24, seed, 50).unwrap();
        let test = data::classification_set(&corpus, 64, 24, seed, 51).unwrap();
        (corpus, train, test)
    }

    fn small_model(vocab: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            n_experts: 3,
            top_k: 2,
            context: 32,
            vocab_size: vocab,
            ..ModelConfig::nano()
        };
        Model::init(&cfg, seed).unwrap()
    }

    #[test]
    fn backbone_and_routers_stay_bitwise_frozen() {
        let (corpus, train, test) = task_fixture(0);
        let mut model = small_model(corpus.vocab_size(), 0);
        let before: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .filter(|(n, _)| !n.contains(".smoe.expert"))
            .map(|(n, p)| (n.clone(), p.data.clone()))
            .collect();
        let experts_before: Vec<Vec<f64>> = model
            .params
            .iter()
            .filter(|(n, _)| n.contains(".smoe.expert"))
            .map(|(_, p)| p.data.clone())
            .collect();

        let cfg = FinetuneConfig { steps: 25, ..FinetuneConfig::default() };
        finetune(&mut model, &train, &test, &cfg).unwrap();

        for (name, data) in &before {
            assert_eq!(
                &model.params.get(name).unwrap().data,
                data,
                "{name} must stay bitwise frozen"
            );
        }
        let experts_after: Vec<Vec<f64>> = model
            .params
            .iter()
            .filter(|(n, _)| n.contains(".smoe.expert"))
            .map(|(_, p)| p.data.clone())
            .collect();
        assert_ne!(experts_before, experts_after, "experts must actually train");
    }

    #[test]
    fn head_only_mode_touches_nothing_but_the_head() {
        let (corpus, train, test) = task_fixture(1);
        let mut model = small_model(corpus.vocab_size(), 1);
        let before: Vec<(String, Vec<f64>)> =
            model.params.iter().map(|(n, p)| (n.clone(), p.data.clone())).collect();
        let cfg =
            FinetuneConfig { steps: 25, head_only: true, ..FinetuneConfig::default() };
        finetune(&mut model, &train, &test, &cfg).unwrap();
        for (name, data) in &before {
            assert_eq!(&model.params.get(name).unwrap().data, data, "{name} moved");
        }
        assert!(model.params.contains("cls.w1"));
    }

    #[test]
    fn separable_task_reaches_high_accuracy() {
        let (corpus, train, test) = task_fixture(2);
        let mut model = small_model(corpus.vocab_size(), 2);
        let cfg = FinetuneConfig {
            steps: 400,
            base_lr: 5e-3,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let report = finetune(&mut model, &train, &test, &cfg).unwrap();
        assert!(
            report.test_accuracy > 0.95,
            "marker task should be learnable: test accuracy {}, train accuracy {}, loss {}",
            report.test_accuracy,
            report.train_accuracy,
            report.final_loss
        );
        assert!(report.train_accuracy > 0.95, "train accuracy {}", report.train_accuracy);
    }

    #[test]
    fn expert_finetuning_is_at_least_as_good_as_the_head_probe() {
        // Paired across three seeds; compare medians.
        let mut expert_acc = Vec::new();
        let mut head_acc = Vec::new();
        for seed in 0..3u64 {
            let (corpus, train, test) = task_fixture(seed);
            let run = |head_only: bool| {
                let mut model = small_model(corpus.vocab_size(), seed);
                let cfg = FinetuneConfig {
                    steps: 120,
                    seed,
                    head_only,
                    ..FinetuneConfig::default()
                };
                finetune(&mut model, &train, &test, &cfg).unwrap().test_accuracy
            };
            expert_acc.push(run(false));
            head_acc.push(run(true));
        }
        expert_acc.sort_by(f64::total_cmp);
        head_acc.sort_by(f64::total_cmp);
        assert!(
            head_acc[1] <= expert_acc[1],
            "head-only median {} should not beat expert-finetuned median {}",
            head_acc[1],
            expert_acc[1]
        );
    }

    #[test]
    fn vocabulary_and_context_mismatches_are_rejected() {
        let (_, train, test) = task_fixture(3);
        // A model whose vocabulary is smaller than the task's ids.
        let mut tiny_vocab = small_model(3, 3);
        let err = finetune(&mut tiny_vocab, &train, &test, &FinetuneConfig::default())
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("vocabulary"), "got: {err}");

        // A model whose context is shorter than the task windows.
        let corpus =
            Corpus::from_bytes(&data::synthetic_text(6_000, 17), SplitFractions::default())
                .unwrap();
        let mut short = small_model(corpus.vocab_size(), 3);
        short.config.context = 8;
        let err =
            finetune(&mut short, &train, &test, &FinetuneConfig::default()).unwrap_err();
        assert!(err.to_string().contains("context"), "got: {err}");
    }

    #[test]
    fn finetuning_composes_with_a_pretrained_checkpoint() {
        // End-to-end shape of the real workflow: train briefly, checkpoint,
        // reload, finetune the reloaded model.
        use crate::config::TrainerConfig;
        use crate::config::RunConfig;
        let corpus =
            Corpus::from_bytes(&data::synthetic_text(6_000, 17), SplitFractions::default())
                .unwrap();
        let run_cfg = RunConfig {
            model: ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                d_ff: 24,
                n_experts: 3,
                top_k: 2,
                context: 32,
                ..ModelConfig::nano()
            },
            trainer: TrainerConfig {
                algorithm: Algorithm::Competesmoe,
                steps: 5,
                batch_size: 2,
                context: 24,
                ..TrainerConfig::default()
            },
            ..RunConfig::default()
        };
        let mut trainer = crate::train::Trainer::new(&run_cfg, corpus.clone()).unwrap();
        for _ in 0..5 {
            trainer.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        crate::checkpoint::save(&path, &trainer.model, Some(corpus.vocab_bytes()), 5).unwrap();

        let mut reloaded = crate::checkpoint::load(&path).unwrap().into_model();
        let train = data::classification_set(&corpus, 32, 24, 4, 50).unwrap();
        let test = data::classification_set(&corpus, 16, 24, 4, 51).unwrap();
        let cfg = FinetuneConfig { steps: 30, ..FinetuneConfig::default() };
        let report = finetune(&mut reloaded, &train, &test, &cfg).unwrap();
        assert!(report.final_loss.is_finite());
        assert!((0.0..=1.0).contains(&report.test_accuracy));
    }
}
