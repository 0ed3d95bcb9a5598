//! Calibration of the label-permutation test under the null.

use cystonet::metrics::permutation_test;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const PERMS: usize = 1000;
const SAMPLES: usize = 200;

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut below = 0;
    for trial in 0..TRIALS {
        let scores: Vec<f64> = (0..SAMPLES).map(|_| rng.random::<f64>()).collect();
        let mut labels: Vec<bool> = (0..SAMPLES).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let r = permutation_test(&scores, &labels, PERMS, trial as u64).unwrap();
        assert!(r.p_value >= 1.0 / (PERMS as f64 + 1.0) && r.p_value <= 1.0, "p {} out of range", r.p_value);
        below += usize::from(r.p_value < 0.05);
    }
    let fraction = below as f64 / TRIALS as f64;
    assert!((0.01..=0.12).contains(&fraction), "{below}/{TRIALS} null trials gave p < 0.05");

    // perfectly separated scores beat every relabelling except ties at AUC 1
    let scores: Vec<f64> = (0..SAMPLES).map(|i| i as f64).collect();
    let labels: Vec<bool> = (0..SAMPLES).map(|i| i >= SAMPLES / 2).collect();
    let r = permutation_test(&scores, &labels, PERMS, 5).unwrap();
    assert_eq!(r.observed, 1.0);
    assert_eq!(r.p_value, 1.0 / 1001.0, "minimum p is 1/(n+1)");
    format!("{below}/{TRIALS} null trials below 0.05 (fraction {fraction:.2}); separated data gives p = 1/1001")
}
