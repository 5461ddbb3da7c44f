//! Scratch diagnostic: inspect individual restart outcomes of the mixture
//! fit on a hand-picked ground truth. Not part of the test suite.

use competesmoe::rng::seeded_stream;
use competesmoe::stats::{
    mle_fit, refine, sample_dataset, voronoi_loss, Atom, FitOptions, MixingMeasure,
};

fn show(tag: &str, m: &MixingMeasure, loglik: f64, truth: &MixingMeasure) {
    let d = voronoi_loss(m, truth, 1).unwrap();
    print!("{tag:<14} loglik {loglik:+9.4}  D {d:6.3}  atoms:");
    for a in &m.atoms {
        print!("  (w {:+5.2}, b {:+5.2}, s2 {:5.3})", a.w[0], a.w[1], a.sigma);
    }
    println!();
}

fn main() {
    let truth = MixingMeasure::new(vec![
        Atom::new(vec![2.0, 1.0], 0.2),
        Atom::new(vec![1.0, -2.0], 0.4),
    ])
    .unwrap();
    let mut rng = seeded_stream(12345, 0);
    let data = sample_dataset(&truth, 1, 10_000, &mut rng).unwrap();

    let frozen = FitOptions { max_iters: 0, ..FitOptions::default() };
    let at_truth = refine(&data, &truth, 1, &frozen).unwrap();
    show("truth", &at_truth.measure, at_truth.loglik, &truth);

    let warm = refine(&data, &truth, 1, &FitOptions::default()).unwrap();
    show("warm-start", &warm.measure, warm.loglik, &truth);

    for seed in 0..10u64 {
        let opts = FitOptions { restarts: 1, seed, ..FitOptions::default() };
        match mle_fit(&data, 2, 1, &opts) {
            Ok(fit) => show(&format!("restart s={seed}"), &fit.measure, fit.loglik, &truth),
            Err(e) => println!("restart s={seed} FAILED: {e}"),
        }
    }
}
