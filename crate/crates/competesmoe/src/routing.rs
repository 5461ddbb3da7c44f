//! Affinity scores, TopK gating, the competition mechanism, and the router
//! distillation loss.
//!
//! Scores come from one of five producers. Gating keeps the K largest scores
//! per token, masks the rest to `-inf`, and normalizes the survivors with a
//! softmax, so non-selected experts carry exactly zero weight and zero
//! gradient. Ties are always broken toward the lowest expert index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// Smallest value the learnable cosine temperature may take; the optimizer
/// projects it back here if an update would drive it non-positive.
pub const TAU_FLOOR: f64 = 1e-3;

/// The five affinity-score producers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Learned linear scores, Switch-style.
    Linear,
    /// XMoE: cosine similarity in a learned low-dimensional space, divided
    /// by a learnable temperature.
    CosineXmoe,
    /// Linear scores from a randomly initialized matrix that stays frozen
    /// for the whole run.
    FixedRandom,
    /// Linear scores; the trainer freezes them after its first phase.
    Stablemoe,
    /// Linear scores trained to predict competition outcomes. Identical
    /// math to `Linear`; the tag selects the scheduled-distillation trainer.
    CompetitionProxy,
}

impl RouterKind {
    /// Routers whose parameters are frozen from step 0.
    pub fn frozen_at_init(self) -> bool {
        matches!(self, RouterKind::FixedRandom)
    }
}

/// Per-token gating result: `weights` is a `[tokens, N]` tensor with exactly
/// K strictly positive entries per row summing to 1; `selected` lists those
/// K expert indices per token in descending-score order (ties ascending).
#[derive(Debug)]
pub struct GatingOutput {
    pub weights: NodeId,
    pub selected: Vec<Vec<usize>>,
}

/// Indices of the K largest entries of `row`, descending by score, ties
/// broken by ascending index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("affinity scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::config(
            "router.k",
            format!("K must satisfy 1 <= K <= N, got K={k} with N={n}"),
        ));
    }
    Ok(())
}

/// Keep the K largest entries, set the rest to `-inf`.
pub fn topk_mask(v: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(k, v.len())?;
    let keep = topk_indices(v, k);
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

/// TopK-mask a `[tokens, N]` score tensor on the tape and softmax the
/// survivors into combination weights.
pub fn gate(tape: &mut Tape, scores: NodeId, k: usize) -> Result<GatingOutput> {
    let shape = tape.shape(scores);
    let (m, n) = match shape[..] {
        [m, n] => (m, n),
        _ => {
            return Err(Error::RankMismatch {
                op: "gate",
                expected: 2,
                shape: shape.to_vec(),
            })
        }
    };
    check_k(k, n)?;
    let mut mask = vec![true; m * n];
    let mut selected = Vec::with_capacity(m);
    for i in 0..m {
        let keep = topk_indices(&tape.data(scores)[i * n..(i + 1) * n], k);
        for &j in &keep {
            mask[i * n + j] = false;
        }
        selected.push(keep);
    }
    let masked = tape.masked_fill(scores, &mask)?;
    let weights = tape.softmax_rows(masked)?;
    Ok(GatingOutput { weights, selected })
}

/// Linear affinity scores `z · W_r` for a `[tokens, d]` input and `[d, N]`
/// router matrix. Also the score function for the fixed-random, StableMoE,
/// and competition-proxy kinds.
pub fn linear_scores(tape: &mut Tape, z: NodeId, w_r: NodeId) -> Result<NodeId> {
    tape.matmul(z, w_r)
}

/// XMoE scores: project `z` with `w_down` `[d, p]`, L2-normalize the rows,
/// L2-normalize the columns of the expert embedding table `e` `[p, N]`, and
/// divide their cosine similarities by the temperature node `tau` (`[1]`).
pub fn cosine_scores(
    tape: &mut Tape,
    z: NodeId,
    w_down: NodeId,
    e: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    if tape.data(tau)[0] <= 0.0 {
        return Err(Error::config(
            "router.temperature",
            format!("cosine temperature must be > 0, got {}", tape.data(tau)[0]),
        ));
    }
    let proj = tape.matmul(z, w_down)?;
    let proj_n = tape.normalize_rows(proj)?;
    let e_t = tape.transpose(e)?;
    let e_tn = tape.normalize_rows(e_t)?;
    let e_n = tape.transpose(e_tn)?;
    let cos = tape.matmul(proj_n, e_n)?;
    tape.div_scalar(cos, tau)
}

/// Competition affinity: score expert `i` on each token by the Euclidean
/// norm of its own output. Takes the N dense expert outputs (each
/// `[tokens, d]`) and returns `[tokens, N]` scores, all ≥ 0.
pub fn competition_affinity(tape: &mut Tape, expert_outputs: &[NodeId]) -> Result<NodeId> {
    assert!(!expert_outputs.is_empty(), "competition over zero experts");
    let mut cols = Vec::with_capacity(expert_outputs.len());
    for &h in expert_outputs {
        let norms = tape.l2_norm_rows(h)?;
        let m = tape.shape(norms)[0];
        cols.push(tape.reshape(norms, vec![m, 1])?);
    }
    tape.concat_cols(&cols)
}

/// Distillation loss: MSE between the router's gating weights and the
/// competition's gating weights, mean over tokens and experts. The
/// competition side is detached first, so no gradient reaches the experts
/// through the target.
pub fn router_loss(tape: &mut Tape, s_router: NodeId, s_competition: NodeId, k: usize) -> Result<NodeId> {
    if tape.shape(s_router) != tape.shape(s_competition) {
        return Err(Error::ShapeMismatch {
            op: "router_loss",
            lhs: tape.shape(s_router).to_vec(),
            rhs: tape.shape(s_competition).to_vec(),
        });
    }
    let target_scores = tape.detach(s_competition);
    let router_gate = gate(tape, s_router, k)?;
    let competition_gate = gate(tape, target_scores, k)?;
    tape.mse(router_gate.weights, competition_gate.weights)
}

/// Mean over tokens of the entropy −Σ_i w_i ln w_i of each K-sparse weight
/// row (with 0·ln 0 := 0). `weights` is the flat `[tokens, N]` gate matrix.
pub fn routing_entropy(weights: &[f64], n: usize) -> f64 {
    assert!(n > 0 && weights.len() % n == 0, "flat weights not divisible into rows");
    let rows = weights.len() / n;
    if rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..rows {
        for &w in &weights[i * n..(i + 1) * n] {
            if w > 0.0 {
                total -= w * w.ln();
            }
        }
    }
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn topk_mask_keeps_largest_and_breaks_ties_low() {
        assert_eq!(
            topk_mask(&[5.0, 1.0, 9.0], 2).unwrap(),
            [5.0, f64::NEG_INFINITY, 9.0]
        );
        // K = N leaves the vector unchanged.
        assert_eq!(topk_mask(&[3.0, 1.0, 2.0], 3).unwrap(), [3.0, 1.0, 2.0]);
        // All-equal scores: lowest index wins.
        assert_eq!(
            topk_mask(&[7.0, 7.0, 7.0], 1).unwrap(),
            [7.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
        );
    }

    #[test]
    fn topk_mask_rejects_bad_k() {
        assert!(topk_mask(&[1.0, 2.0], 0).is_err());
        assert!(topk_mask(&[1.0, 2.0], 3).is_err());
        let err = topk_mask(&[1.0, 2.0], 3).unwrap_err();
        assert_eq!(err.exit_code(), 3, "K range violations are config errors");
    }

    #[test]
    fn gate_two_of_three_frozen_weights() {
        let mut t = Tape::new();
        let s = t.constant(vec![2.0, 1.0, 0.0], vec![1, 3]).unwrap();
        let g = gate(&mut t, s, 2).unwrap();
        let w = t.data(g.weights);
        assert!(close(w[0], 0.731_058_578_630_0049, 1e-12));
        assert!(close(w[1], 0.268_941_421_369_9951, 1e-12));
        assert_eq!(w[2], 0.0);
        assert_eq!(g.selected[0], [0, 1]);
    }

    #[test]
    fn gate_k1_is_one_hot_and_kn_uniform() {
        let mut t = Tape::new();
        let s = t.constant(vec![0.3, 0.9, 0.1], vec![1, 3]).unwrap();
        let g1 = gate(&mut t, s, 1).unwrap();
        assert_eq!(t.data(g1.weights), [0.0, 1.0, 0.0]);
        assert_eq!(g1.selected[0], [1]);

        let u = t.constant(vec![4.0, 4.0, 4.0, 4.0], vec![1, 4]).unwrap();
        let gu = gate(&mut t, u, 4).unwrap();
        for &w in t.data(gu.weights) {
            assert!(close(w, 0.25, 1e-12));
        }
    }

    #[test]
    fn gate_rows_sum_to_one_with_k_nonzeros() {
        let mut t = Tape::new();
        let s = t
            .constant(vec![0.1, -2.0, 1.4, 0.7, 3.0, 3.0, -1.0, 0.0], vec![2, 4])
            .unwrap();
        let g = gate(&mut t, s, 2).unwrap();
        let w = t.data(g.weights);
        for i in 0..2 {
            let row = &w[i * 4..(i + 1) * 4];
            let sum: f64 = row.iter().sum();
            assert!(close(sum, 1.0, 1e-10));
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 2);
        }
        // Tie in row 1 between experts 0 and 1 resolves to both anyway (K=2);
        // selected order is descending score then ascending index.
        assert_eq!(g.selected[1], [0, 1]);
    }

    #[test]
    fn linear_scores_hand_instance_and_zero_router() {
        let mut t = Tape::new();
        // d=1: z=[2], W_r=[[1,3]] → s=[2,6].
        let z = t.constant(vec![2.0], vec![1, 1]).unwrap();
        let w = t.constant(vec![1.0, 3.0], vec![1, 2]).unwrap();
        let s = linear_scores(&mut t, z, w).unwrap();
        assert_eq!(t.data(s), [2.0, 6.0]);

        // Zero router: all scores equal → gate picks the K lowest indices
        // uniformly.
        let z2 = t.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let w0 = t.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let s0 = linear_scores(&mut t, z2, w0).unwrap();
        let g = gate(&mut t, s0, 2).unwrap();
        assert_eq!(g.selected[0], [0, 1]);
        let wt = t.data(g.weights);
        assert!(close(wt[0], 0.5, 1e-12) && close(wt[1], 0.5, 1e-12));
    }

    #[test]
    fn linear_scores_one_hot_rows_select_matching_columns() {
        let mut t = Tape::new();
        let z = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let w = t.constant(vec![10.0, 20.0, 30.0, 40.0], vec![2, 2]).unwrap();
        let s = linear_scores(&mut t, z, w).unwrap();
        assert_eq!(t.data(s), [10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn cosine_scores_parallel_orthogonal_and_scale_invariant() {
        let tau_val = 0.07;
        let mut t = Tape::new();
        // p=2, N=2: E columns are e0=(1,0), e1=(0,1).
        let e = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let tau = t.constant(vec![tau_val], vec![1]).unwrap();
        // Identity down-projection; z row parallel to e0.
        let w_down = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let z = t.constant(vec![3.0, 0.0], vec![1, 2]).unwrap();
        let s = cosine_scores(&mut t, z, w_down, e, tau).unwrap();
        assert!(close(t.data(s)[0], 1.0 / tau_val, 1e-12), "parallel → 1/τ");
        assert!(close(t.data(s)[1], 0.0, 1e-12), "orthogonal → 0");

        // Positive rescaling of z leaves the scores bit-identical in value.
        let z_scaled = t.constant(vec![300.0, 0.0], vec![1, 2]).unwrap();
        let s2 = cosine_scores(&mut t, z_scaled, w_down, e, tau).unwrap();
        assert_eq!(t.data(s).to_vec(), t.data(s2).to_vec());
    }

    #[test]
    fn cosine_scores_rejects_non_positive_temperature() {
        let mut t = Tape::new();
        let e = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let tau = t.constant(vec![0.0], vec![1]).unwrap();
        let w_down = t.constant(vec![1.0], vec![1, 1]).unwrap();
        let z = t.constant(vec![1.0], vec![1, 1]).unwrap();
        let err = cosine_scores(&mut t, z, w_down, e, tau).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn competition_affinity_norms_and_selection() {
        let mut t = Tape::new();
        let e0 = t.constant(vec![3.0, 4.0], vec![1, 2]).unwrap();
        let e1 = t.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let s = competition_affinity(&mut t, &[e0, e1]).unwrap();
        assert_eq!(t.data(s), [5.0, 0.0]);
        let g = gate(&mut t, s, 1).unwrap();
        assert_eq!(g.selected[0], [0]);
        assert_eq!(t.data(g.weights), [1.0, 0.0]);
    }

    #[test]
    fn competition_affinity_ties_resolve_to_lower_index() {
        let mut t = Tape::new();
        let e0 = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let e1 = t.constant(vec![2.0, 1.0], vec![1, 2]).unwrap(); // same norm
        let s = competition_affinity(&mut t, &[e0, e1]).unwrap();
        let g = gate(&mut t, s, 1).unwrap();
        assert_eq!(g.selected[0], [0]);
    }

    #[test]
    fn competition_affinity_matches_norm_sort_oracle() {
        let mut t = Tape::new();
        // Four experts with distinct hand-picked outputs on two tokens.
        let outs: Vec<NodeId> = [
            vec![1.0, 0.0, 0.5, 0.5],
            vec![0.0, 2.5, 1.0, 1.0],
            vec![0.3, 0.3, 3.0, 0.0],
            vec![2.0, 2.0, 0.1, 0.1],
        ]
        .into_iter()
        .map(|v| t.constant(v, vec![2, 2]).unwrap())
        .collect();
        let s = competition_affinity(&mut t, &outs).unwrap();
        for token in 0..2 {
            let mut norms = Vec::new();
            for e in 0..4 {
                let d = t.data(outs[e]);
                let row = &d[token * 2..(token + 1) * 2];
                norms.push((row[0] * row[0] + row[1] * row[1]).sqrt());
            }
            let got = &t.data(s)[token * 4..(token + 1) * 4];
            for (g, n) in got.iter().zip(&norms) {
                assert!(close(*g, *n, 1e-12));
            }
            let g = gate(&mut t, s, 2).unwrap();
            assert_eq!(g.selected[token], topk_indices(&norms, 2));
        }
    }

    #[test]
    fn router_loss_zero_on_agreement_unit_on_k1_disagreement() {
        let mut t = Tape::new();
        let s = t.constant(vec![0.4, 1.2, -0.3], vec![1, 3]).unwrap();
        let same = router_loss(&mut t, s, s, 2).unwrap();
        assert_eq!(t.value(same), 0.0);

        // N=2, K=1, opposite argmax: one-hot vs one-hot differs in both
        // entries → mean of [1, 1] = 1.
        let sr = t.constant(vec![2.0, 0.0], vec![1, 2]).unwrap();
        let sc = t.constant(vec![0.0, 2.0], vec![1, 2]).unwrap();
        let l = router_loss(&mut t, sr, sc, 1).unwrap();
        assert!(close(t.value(l), 1.0, 1e-12));
    }

    #[test]
    fn router_loss_sends_no_gradient_into_competition_scores() {
        let mut t = Tape::new();
        // Competition scores built from a trainable "expert output".
        let expert_out = t
            .leaf(vec![1.0, 2.0, 0.5, 0.1], vec![2, 2], true)
            .unwrap();
        let s_c = competition_affinity(&mut t, &[expert_out]).unwrap();
        // Single-expert setup is degenerate; widen with a constant column.
        let pad = t.constant(vec![0.2, 0.4], vec![2, 1]).unwrap();
        let s_c2 = t.concat_cols(&[s_c, pad]).unwrap();
        let s_r = t.leaf(vec![0.1, 0.0, 0.3, 0.2], vec![2, 2], true).unwrap();
        let loss = router_loss(&mut t, s_r, s_c2, 1).unwrap();
        t.backward(loss).unwrap();
        assert!(
            t.grad(expert_out).is_none(),
            "detached target must block gradients into expert outputs"
        );
        assert!(t.grad(s_r).is_some());
    }

    #[test]
    fn entropy_one_hot_uniform2_and_uniform16() {
        // One-hot rows → 0.
        assert_eq!(routing_entropy(&[1.0, 0.0, 0.0, 1.0], 2), 0.0);
        // Uniform over K=2 → ln 2.
        assert!(close(routing_entropy(&[0.5, 0.5, 0.0], 3), 2.0f64.ln(), 1e-12));
        // Uniform over N=K=16 → ln 16 ≈ 2.7726.
        let row = vec![1.0 / 16.0; 16];
        assert!(close(routing_entropy(&row, 16), 16.0f64.ln(), 1e-12));
        assert!(close(routing_entropy(&row, 16), 2.772_588_722_239_781, 1e-12));
    }

    #[test]
    fn gate_weight_gradients_flow_to_scores() {
        let mut t = Tape::new();
        let s = t.leaf(vec![1.0, 0.5, -0.5], vec![1, 3], true).unwrap();
        let g = gate(&mut t, s, 2).unwrap();
        // Mean of the whole row would be constant (rows sum to 1); pull on a
        // single weight instead.
        let w0 = t.column(g.weights, 0).unwrap();
        let loss = t.sum(w0);
        t.backward(loss).unwrap();
        let grad = t.grad(s).unwrap();
        assert_eq!(grad[2], 0.0, "non-selected expert score gets zero gradient");
        assert!(grad[0] > 0.0, "raising the top score raises its weight");
        assert!(grad[1] < 0.0, "raising the rival score lowers weight 0");
    }
}
