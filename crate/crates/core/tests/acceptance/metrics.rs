//! Evaluation mathematics against brute-force oracles.

use std::collections::HashSet;

use cystonet::dataio::BinaryMask;
use cystonet::metrics::{classification_metrics, roc_auc, seg_metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            nn += 1;
            continue;
        }
        np += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if !labels[j] {
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (np as f64 * nn as f64)
}

fn auc_fixtures() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let n = rng.random_range(2..=50);
        // coarse scores force ties
        let levels = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = roc_auc(&scores, &labels).unwrap();
        let want = pair_count_auc(&scores, &labels);
        assert!(got == want, "fixture {trial}: rank AUC {got} != pair count {want}");
        let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
        let rev = roc_auc(&reversed, &labels).unwrap();
        assert!((rev - (1.0 - got)).abs() < 1e-12, "fixture {trial}: reversal gives {rev}, not 1 - {got}");
    }
    let s = [0.9, 0.8, 0.3, 0.2];
    assert_eq!(roc_auc(&s, &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(roc_auc(&s, &[true, false, true, false]).unwrap(), 0.75);
    assert!(roc_auc(&s, &[true; 4]).is_err(), "single-class AUC must be an error");
    100
}

type Pixels = HashSet<(usize, usize)>;

fn pixels(m: &BinaryMask) -> Pixels {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = [0.0, 0.05, 0.3, 0.7, 1.0][rng.random_range(0..5)];
    let mut m = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, rng.random_bool(density));
        }
    }
    m
}

fn seg_fixtures() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for trial in 0..300 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (p, t) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (ps, ts) = (pixels(&p), pixels(&t));
        let all = h * w;
        let inter = ps.intersection(&ts).count();
        let union = ps.union(&ts).count();
        let got = seg_metrics(&p, &t).unwrap();
        if ps.is_empty() && ts.is_empty() {
            assert!(got.vacuous && got.dice == 1.0 && got.iou == 1.0, "fixture {trial}: empty pair not vacuous");
        } else {
            let dice = 2.0 * inter as f64 / (ps.len() + ts.len()) as f64;
            let iou = inter as f64 / union as f64;
            assert!(got.dice == dice, "fixture {trial}: dice {} != {dice}", got.dice);
            assert!(got.iou == iou, "fixture {trial}: iou {} != {iou}", got.iou);
            assert!(!got.vacuous);
        }
        let sens = (!ts.is_empty()).then(|| inter as f64 / ts.len() as f64);
        let background = all - ts.len();
        let true_neg = all - union;
        let spec = (background > 0).then(|| true_neg as f64 / background as f64);
        assert!(got.sensitivity == sens, "fixture {trial}: sensitivity {:?} != {sens:?}", got.sensitivity);
        assert!(got.specificity == spec, "fixture {trial}: specificity {:?} != {spec:?}", got.specificity);
        let identity = got.dice / (2.0 - got.dice);
        assert!((got.iou - identity).abs() <= 1e-12, "fixture {trial}: IoU {} vs D/(2-D) {identity}", got.iou);
        checked += 1;
    }

    let mut p = BinaryMask::new(4, 4);
    let mut t = BinaryMask::new(4, 4);
    for x in 0..4 {
        p.set(0, x, true);
    }
    for x in 2..6 {
        t.set(x / 4, x % 4, true);
    }
    let m = seg_metrics(&p, &t).unwrap();
    assert_eq!((m.dice, m.iou), (0.5, 1.0 / 3.0));
    checked
}

fn confusion_example() {
    // TP=2, FP=1, FN=1, TN=6
    let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
    let labels = [true, true, false, true, false, false, false, false, false, false];
    let m = classification_metrics(&scores, &labels, 0.5).unwrap();
    let c = m.confusion;
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 6));
    assert_eq!(m.precision, Some(2.0 / 3.0));
    assert_eq!(m.recall, Some(2.0 / 3.0));
    assert_eq!(m.f1, Some(2.0 / 3.0));
    assert_eq!(m.accuracy, 0.8);
}

pub fn run() -> String {
    let a = auc_fixtures();
    let s = seg_fixtures();
    confusion_example();
    format!("{a} AUC fixtures equal pair counting exactly; {s} mask pairs equal pixel-set oracles exactly")
}
