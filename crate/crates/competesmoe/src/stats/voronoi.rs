//! The Voronoi-cell parameter loss between a fitted and a true mixing
//! measure.
//!
//! Each fitted atom is assigned to its nearest true atom (Euclidean
//! distance on the concatenated `(W, σ)` vector, ties toward the lower
//! true index), partitioning the fitted atoms into one cell per true
//! atom. The loss is the worst case over all K-element subsets of true
//! atoms of the summed within-cell discrepancies `‖W_i − W*_j‖ + |σ_i −
//! σ*_j|`. Subsets are enumerated outright — `C(k*, K)` stays tiny at the
//! scales this workbench runs — which keeps the implementation a literal
//! transcription of the definition rather than a clever reduction.

use crate::error::{Error, Result};
use crate::stats::MixingMeasure;

/// All K-element index subsets of `0..n`, lexicographic.
fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Nearest true atom per fitted atom; ties take the lowest true index.
fn assign_cells(g: &MixingMeasure, g_star: &MixingMeasure) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); g_star.k()];
    for (i, fitted) in g.atoms.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, true_atom) in g_star.atoms.iter().enumerate() {
            let d = fitted.distance(true_atom);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        cells[best].push(i);
    }
    cells
}

/// The Voronoi loss `D(G, G*)` at gate size `K`.
pub fn voronoi_loss(g: &MixingMeasure, g_star: &MixingMeasure, k_top: usize) -> Result<f64> {
    if g.k() != g_star.k() {
        return Err(Error::AtomCountMismatch { lhs: g.k(), rhs: g_star.k() });
    }
    if g.dim() != g_star.dim() {
        return Err(Error::Fit(format!(
            "measure dimensions differ: {} vs {}",
            g.dim(),
            g_star.dim()
        )));
    }
    let k_star = g_star.k();
    if k_top == 0 || k_top > k_star {
        return Err(Error::config(
            "voronoi.k",
            format!("K must satisfy 1 <= K <= k*, got K={k_top} with k*={k_star}"),
        ));
    }

    let cells = assign_cells(g, g_star);
    let cell_sums: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(j, cell)| {
            cell.iter()
                .map(|&i| {
                    let f = &g.atoms[i];
                    let t = &g_star.atoms[j];
                    let dw: f64 = f
                        .w
                        .iter()
                        .zip(&t.w)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    dw + (f.sigma - t.sigma).abs()
                })
                .sum()
        })
        .collect();

    Ok(k_subsets(k_star, k_top)
        .into_iter()
        .map(|subset| subset.into_iter().map(|j| cell_sums[j]).sum())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;
    use crate::stats::Atom;
    use rand::Rng;

    fn measure(atoms: &[(&[f64], f64)]) -> MixingMeasure {
        MixingMeasure::new(
            atoms.iter().map(|(w, s)| Atom::new(w.to_vec(), *s)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_measures_have_zero_loss() {
        let g = measure(&[(&[0.5, 1.0], 0.3), (&[-1.0, 2.0], 0.7)]);
        assert_eq!(voronoi_loss(&g, &g, 1).unwrap(), 0.0);
        assert_eq!(voronoi_loss(&g, &g, 2).unwrap(), 0.0);
    }

    #[test]
    fn permuted_atoms_still_give_zero() {
        let g = measure(&[(&[0.5, 1.0], 0.3), (&[-1.0, 2.0], 0.7), (&[3.0, 0.0], 1.1)]);
        let p = measure(&[(&[3.0, 0.0], 1.1), (&[0.5, 1.0], 0.3), (&[-1.0, 2.0], 0.7)]);
        assert_eq!(voronoi_loss(&p, &g, 2).unwrap(), 0.0);
    }

    #[test]
    fn single_atom_loss_is_the_sum_of_the_two_norms() {
        let g = measure(&[(&[1.0, 2.0], 0.5)]);
        let t = measure(&[(&[0.0, 0.0], 0.8)]);
        let expect = (1.0f64 + 4.0).sqrt() + 0.3;
        assert!((voronoi_loss(&g, &t, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn hand_instance_matches_the_enumeration() {
        // Cells: f0→t0 (0.1), f1→t1 (0.1√2 + 0.1), f2→t2 (0.2√2 + 0.1).
        // Best 2-subset is {t1, t2}.
        let t = measure(&[(&[0.0, 0.0], 0.5), (&[2.0, 0.0], 0.5), (&[0.0, 2.0], 0.5)]);
        let f = measure(&[(&[0.1, 0.0], 0.5), (&[1.9, 0.1], 0.6), (&[0.2, 1.8], 0.4)]);
        let expect = (0.1 * 2.0f64.sqrt() + 0.1) + (0.2 * 2.0f64.sqrt() + 0.1);
        assert!((voronoi_loss(&f, &t, 2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn subset_maximum_equals_the_top_k_cell_sums_on_random_instances() {
        // Independent oracle: the max over K-subsets of a sum of
        // non-negative cell terms is the sum of the K largest cell sums.
        let mut rng = seeded_stream(31, 7);
        for _ in 0..50 {
            let k_star = rng.gen_range(2..=5usize);
            let rand_measure = |rng: &mut rand_chacha::ChaCha8Rng| loop {
                let atoms: Vec<Atom> = (0..k_star)
                    .map(|_| {
                        Atom::new(
                            vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                            rng.gen_range(0.1..2.0),
                        )
                    })
                    .collect();
                if let Ok(m) = MixingMeasure::new(atoms) {
                    break m;
                }
            };
            let g_star = rand_measure(&mut rng);
            let g = rand_measure(&mut rng);
            let k_top = rng.gen_range(1..=k_star);

            let cells = assign_cells(&g, &g_star);
            let mut sums: Vec<f64> = cells
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    cell.iter()
                        .map(|&i| {
                            let dw: f64 = g.atoms[i]
                                .w
                                .iter()
                                .zip(&g_star.atoms[j].w)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt();
                            dw + (g.atoms[i].sigma - g_star.atoms[j].sigma).abs()
                        })
                        .sum()
                })
                .collect();
            sums.sort_by(f64::total_cmp);
            sums.reverse();
            let oracle: f64 = sums[..k_top].iter().sum();
            let got = voronoi_loss(&g, &g_star, k_top).unwrap();
            assert!((got - oracle).abs() < 1e-12, "got {got}, oracle {oracle}");
        }
    }

    #[test]
    fn perturbation_gives_strictly_positive_loss() {
        let g = measure(&[(&[0.5, 1.0], 0.3), (&[-1.0, 2.0], 0.7)]);
        let mut shifted = g.clone();
        shifted.atoms[0].w[0] += 0.01;
        assert!(voronoi_loss(&shifted, &g, 1).unwrap() > 0.0);
    }

    #[test]
    fn mismatched_atom_counts_are_rejected() {
        let a = measure(&[(&[0.0, 0.0], 0.5)]);
        let b = measure(&[(&[0.0, 0.0], 0.5), (&[1.0, 0.0], 0.5)]);
        match voronoi_loss(&a, &b, 1).unwrap_err() {
            Error::AtomCountMismatch { lhs, rhs } => {
                assert_eq!((lhs, rhs), (1, 2));
            }
            other => panic!("expected AtomCountMismatch, got {other}"),
        }
    }

    #[test]
    fn subset_enumeration_counts_binomials() {
        assert_eq!(k_subsets(5, 2).len(), 10);
        assert_eq!(k_subsets(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(k_subsets(3, 1), vec![vec![0], vec![1], vec![2]]);
    }
}
