//! Batch mixing and paired geometric transforms.

use cystonet::augment::{
    apply_geometric, apply_geometric_mask, cutmix, mixup_with, rng_for, AugmentConfig, Batch, GeometricTransform,
};
use cystonet::dataio::{BinaryMask, FloatImage, Normalization};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// every value identifies its sample, channel and pixel
fn tagged_batch(n: usize, c: usize, h: usize, w: usize) -> Batch {
    let images = (0..n * c * h * w).map(|i| i as f32).collect();
    let labels = (0..n).flat_map(|i| [f32::from(i % 2 == 0), f32::from(i % 2 == 1)]).collect();
    Batch::new(images, labels, (n, c, h, w), 2).unwrap()
}

fn cutmix_boxes() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut measured = 0;
    while measured < 200 {
        let (n, h, w) = (rng.random_range(2..5), rng.random_range(4..40), rng.random_range(4..40));
        let batch = tagged_batch(n, 3, h, w);
        let mixed = cutmix(&batch, 1.0, &mut rng).unwrap();
        let len = 3 * h * w;
        for (i, &j) in mixed.partner.iter().enumerate() {
            if i == j {
                continue;
            }
            // a pixel is pasted when every channel carries the partner's tag
            let mut pasted = 0usize;
            for p in 0..h * w {
                let from_partner = (0..3).all(|c| mixed.images[i * len + c * h * w + p] == batch.images[j * len + c * h * w + p]);
                let from_self = (0..3).all(|c| mixed.images[i * len + c * h * w + p] == batch.images[i * len + c * h * w + p]);
                assert!(from_partner ^ from_self, "pixel {p} of sample {i} is neither kept nor pasted");
                pasted += usize::from(from_partner);
            }
            let total = (h * w) as f64;
            assert!(
                mixed.lambda == (h * w - pasted) as f64 / total,
                "lambda {} but {} of {} pixels pasted",
                mixed.lambda,
                pasted,
                h * w
            );
            for k in 0..2 {
                let want = (mixed.lambda * batch.labels[i * 2 + k] as f64 + (pasted as f64 / total) * batch.labels[j * 2 + k] as f64) as f32;
                assert_eq!(mixed.labels[i * 2 + k], want, "label weights do not follow the pasted area");
            }
            measured += 1;
        }
    }
    measured
}

fn mixup_endpoints() {
    let batch = tagged_batch(4, 3, 5, 7);
    let partner = [2, 3, 1, 0];
    let keep = mixup_with(&batch, 1.0, &partner).unwrap();
    assert_eq!(keep.images, batch.images, "lambda 1 must return the batch bit-exact");
    assert_eq!(keep.labels, batch.labels);
    let swap = mixup_with(&batch, 0.0, &partner).unwrap();
    let len = 3 * 5 * 7;
    for (i, &j) in partner.iter().enumerate() {
        assert_eq!(swap.images[i * len..(i + 1) * len], batch.images[j * len..(j + 1) * len], "lambda 0 must return the partner bit-exact");
        assert_eq!(swap.labels[i * 2..i * 2 + 2], batch.labels[j * 2..j * 2 + 2]);
    }
}

/// Channels 0 and 1 hold each pixel's own row and column; channel 2 is 1
/// everywhere so out-of-frame output is recognizable.
fn coordinate_image(h: usize, w: usize) -> FloatImage {
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = y as f32;
            data[h * w + y * w + x] = x as f32;
            data[2 * h * w + y * w + x] = 1.0;
        }
    }
    FloatImage::new(data, h, w, Normalization::Reference).unwrap()
}

fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::new(h, w);
    for _ in 0..3 {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = rng.random_range(2.0..(h.min(w) as f64 / 3.0));
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    m.set(y, x, true);
                }
            }
        }
    }
    m
}

fn exact_turns() {
    let n = 9;
    let img = coordinate_image(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = blob_mask(&mut rng, n, n);
    // output (y, x) reads source (sy, sx)
    let cases: [(&str, GeometricTransform, fn(usize, usize, usize) -> (usize, usize)); 5] = [
        ("horizontal flip", GeometricTransform { flip_h: true, ..GeometricTransform::identity(n, n) }, |y, x, n| (y, n - 1 - x)),
        ("vertical flip", GeometricTransform { flip_v: true, ..GeometricTransform::identity(n, n) }, |y, x, n| (n - 1 - y, x)),
        ("quarter turn", GeometricTransform { angle_deg: 90.0, ..GeometricTransform::identity(n, n) }, |y, x, n| (n - 1 - x, y)),
        ("half turn", GeometricTransform { angle_deg: 180.0, ..GeometricTransform::identity(n, n) }, |y, x, n| (n - 1 - y, n - 1 - x)),
        ("three-quarter turn", GeometricTransform { angle_deg: 270.0, ..GeometricTransform::identity(n, n) }, |y, x, n| (x, n - 1 - y)),
    ];
    for (name, t, src) in cases {
        let out = t.apply_image(&img).unwrap();
        let om = t.apply_mask(&mask).unwrap();
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = src(y, x, n);
                let got = (out.channel(0)[y * n + x], out.channel(1)[y * n + x]);
                assert_eq!(got, (sy as f32, sx as f32), "{name}: output ({y}, {x})");
                assert_eq!(om.get(y, x), mask.get(sy, sx), "{name}: mask at ({y}, {x})");
            }
        }
    }
}

fn random_transforms() -> (usize, usize) {
    let configs = [AugmentConfig::classification(), AugmentConfig::segmentation(), AugmentConfig::subtyping()];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut compared, mut skipped) = (0, 0);
    for trial in 0..60u64 {
        let cfg = &configs[trial as usize % configs.len()];
        let (h, w) = (rng.random_range(16..48), rng.random_range(16..48));
        let img = coordinate_image(h, w);
        let mask = blob_mask(&mut rng, h, w);
        let (out, om) = apply_geometric(&img, Some(&mask), cfg, &mut rng_for(trial, 0)).unwrap();
        let om = om.unwrap();
        let alone = apply_geometric_mask(&mask, cfg, &mut rng_for(trial, 0)).unwrap();
        assert_eq!(om, alone, "trial {trial}: paired mask differs from the mask transformed alone");
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if out.channel(2)[i] == 0.0 {
                    assert!(!om.get(y, x), "trial {trial}: out-of-frame pixel ({y}, {x}) set in the mask");
                    continue;
                }
                let (sy, sx) = (out.channel(0)[i] as f64, out.channel(1)[i] as f64);
                // nearest-neighbour is ambiguous at half-pixel offsets
                let near_half = |v: f64| ((v - v.floor()) - 0.5).abs() < 1e-3;
                if out.channel(2)[i] < 0.999 || near_half(sy) || near_half(sx) {
                    skipped += 1;
                    continue;
                }
                let (ry, rx) = (sy.round() as usize, sx.round() as usize);
                assert_eq!(om.get(y, x), mask.get(ry, rx), "trial {trial}: mask at ({y}, {x}) disagrees with image source ({sy:.3}, {sx:.3})");
                compared += 1;
            }
        }
    }
    (compared, skipped)
}

pub fn run() -> String {
    let boxes = cutmix_boxes();
    mixup_endpoints();
    exact_turns();
    let (compared, skipped) = random_transforms();
    format!("{boxes} CutMix boxes match their area fraction exactly; flips and turns exact; {compared} transformed pixels agree ({skipped} half-pixel ties skipped)")
}
