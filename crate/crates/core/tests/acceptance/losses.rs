//! Loss values against hand evaluation, and every analytic gradient
//! against central finite differences in 64-bit.

use candle_core::{DType, Device, Tensor, Var};
use cystonet::losses::*;
use cystonet::nn::{AttentionGate, Cbam, ParamStore, SelfAttention, SqueezeExcite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const RTOL: f64 = 1e-4;
// floor for gradients that are zero up to rounding
const ATOL: f64 = 1e-8;

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn scalar(x: Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(x: &Tensor) -> Vec<f64> {
    x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn close(name: &str, got: f64, want: f64, tol: f64) {
    assert!((got - want).abs() <= tol, "{name}: got {got:.10e}, expected {want:.10e} (tol {tol:e})");
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn grad_ok(name: &str, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        err <= RTOL * scale + ATOL,
        "{name}: analytic {analytic:.8e} vs finite difference {numeric:.8e}"
    );
}

/// Gradient of a scalar function of one input tensor.
fn check_input_grad(name: &str, x0: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> usize {
    let var = Var::from_tensor(&t(x0, shape)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g = flat(grads.get(&var).expect("input receives a gradient"));
    for i in 0..x0.len() {
        let mut up = x0.to_vec();
        let mut dn = x0.to_vec();
        up[i] += H;
        dn[i] -= H;
        let fd = (scalar(f(&t(&up, shape))) - scalar(f(&t(&dn, shape)))) / (2.0 * H);
        grad_ok(&format!("{name}[{i}]"), g[i], fd);
    }
    x0.len()
}

/// Gradients of a block's scalar output with respect to its input and
/// every trainable parameter; `picks` elements are probed per parameter.
fn check_block(name: &str, store: &ParamStore, x0: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor, picks: usize) -> usize {
    let mut checked = check_input_grad(&format!("{name} input"), x0, shape, f);
    let x = t(x0, shape);
    let grads = f(&x).backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (pname, var) in store.named_trainable() {
        let g = flat(grads.get(&var).unwrap_or_else(|| panic!("{name}: {pname} receives no gradient")));
        let base = flat(var.as_tensor());
        let dims = var.as_tensor().dims().to_vec();
        for _ in 0..picks.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let mut v = base.clone();
            v[i] = base[i] + H;
            var.set(&t(&v, &dims)).unwrap();
            let up = scalar(f(&x));
            v[i] = base[i] - H;
            var.set(&t(&v, &dims)).unwrap();
            let dn = scalar(f(&x));
            var.set(&t(&base, &dims)).unwrap();
            grad_ok(&format!("{name} {pname}[{i}]"), g[i], (up - dn) / (2.0 * H));
            checked += 1;
        }
    }
    checked
}

fn hand_values() {
    let cfg = LossConfig::default();
    let ln2 = std::f64::consts::LN_2;
    close("bce at p=0.5", scalar(bce(&t(&[0.5, 0.5], &[2]), &t(&[1.0, 0.0], &[2])).unwrap()), ln2, 1e-6);
    let perfect = scalar(bce(&t(&[1.0, 0.0, 1.0], &[3]), &t(&[1.0, 0.0, 1.0], &[3])).unwrap());
    close("bce at p=y", perfect, 0.0, 1e-6);
    assert!(perfect > 0.0, "clamping keeps the perfect-prediction loss strictly positive");

    let want = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
    let got = scalar(focal(&t(&[0.9], &[1]), &t(&[1.0], &[1]), 2.0, 0.25).unwrap());
    close("focal y=1 p=0.9", got, want, 1e-6);
    close("focal hand value relative", got / want, 1.0, 1e-6);

    let p = t(&[0.1, 0.35, 0.6, 0.92], &[4]);
    let y = t(&[1.0, 0.0, 1.0, 0.0], &[4]);
    let f0 = flat(&focal_elementwise(&p, &y, 0.0, 0.5).unwrap());
    let b0 = flat(&bce_elementwise(&p, &y).unwrap());
    for (i, (a, b)) in f0.iter().zip(&b0).enumerate() {
        close(&format!("focal gamma=0 element {i}"), *a, 0.5 * b, 1e-12);
    }

    // disjoint masks, four pixels each: 1 - 1/9
    let pd = t(&[1., 1., 1., 1., 0., 0., 0., 0.], &[1, 1, 2, 4]);
    let md = t(&[0., 0., 0., 0., 1., 1., 1., 1.], &[1, 1, 2, 4]);
    close("dice disjoint", scalar(soft_dice_loss(&pd, &md, 1.0).unwrap()), 1.0 - 1.0 / 9.0, 1e-6);
    let z = t(&[0.0; 8], &[1, 1, 2, 4]);
    close("dice vacuous", scalar(soft_dice_loss(&z, &z, 1.0).unwrap()), 0.0, 1e-12);
    let exact = scalar(soft_dice_loss(&md, &md, 1.0).unwrap());
    assert!(exact <= 1.0 / 9.0 + 1e-12, "perfect overlap dice loss {exact} above smooth bound");

    let ps = t(&[0.2, 0.7, 0.9, 0.4, 0.55, 0.05, 0.8, 0.3], &[2, 1, 2, 2]);
    let ms = t(&[0., 1., 1., 0., 1., 0., 1., 0.], &[2, 1, 2, 2]);
    let d = scalar(soft_dice_loss(&ps, &ms, 1.0).unwrap());
    let b = scalar(bce(&ps, &ms).unwrap());
    close("compound 0.5/0.5", scalar(compound_seg_loss(&ps, &ms, &cfg).unwrap()), 0.5 * (d + b), 1e-9);
    let only_dice = LossConfig { compound_weights: [1.0, 0.0], ..cfg.clone() };
    let only_bce = LossConfig { compound_weights: [0.0, 1.0], ..cfg.clone() };
    close("compound (1,0)", scalar(compound_seg_loss(&ps, &ms, &only_dice).unwrap()), d, 1e-12);
    close("compound (0,1)", scalar(compound_seg_loss(&ps, &ms, &only_bce).unwrap()), b, 1e-12);
    let unnormalized = LossConfig { compound_weights: [2.0, 2.0], ..cfg.clone() };
    close("compound normalized", scalar(compound_seg_loss(&ps, &ms, &unnormalized).unwrap()), 0.5 * (d + b), 1e-9);

    // logit forms agree with the probability forms away from the clamp
    let zl = [-2.5, -0.3, 0.0, 0.8, 3.1, -1.2];
    let yl = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let probs: Vec<f64> = zl.iter().map(|v: &f64| 1.0 / (1.0 + (-v).exp())).collect();
    close(
        "bce from logits",
        scalar(bce_logits(&t(&zl, &[6]), &t(&yl, &[6])).unwrap()),
        scalar(bce(&t(&probs, &[6]), &t(&yl, &[6])).unwrap()),
        1e-6,
    );
    close(
        "focal from logits",
        scalar(focal_logits(&t(&zl, &[6]), &t(&yl, &[6]), 2.0, 0.25).unwrap()),
        scalar(focal(&t(&probs, &[6]), &t(&yl, &[6]), 2.0, 0.25).unwrap()),
        1e-6,
    );

    // masked multi-label: one confident known entry, everything else unknown
    let zm = t(&[30.0, 0.3, -2.0, 1.0, 0.5, 0.1], &[2, 3]);
    let lone = vec![vec![Some(1.0), None, None], vec![None, None, None]];
    close("masked bce single entry", scalar(masked_multilabel_bce(&zm, &lone).unwrap()), 0.0, 1e-6);
    assert!(masked_multilabel_bce(&zm, &[vec![None; 3], vec![None; 3]]).is_err(), "all-unknown batch must fail");
    let full = vec![vec![Some(1.0), Some(0.0), Some(0.0)], vec![Some(1.0), Some(1.0), Some(0.0)]];
    close(
        "masked bce without unknowns",
        scalar(masked_multilabel_bce(&zm, &full).unwrap()),
        scalar(bce_logits(&zm, &t(&[1., 0., 0., 1., 1., 0.], &[2, 3])).unwrap()),
        1e-12,
    );

    // unknown marker: its head row gets exactly zero gradient from that sample
    let w = Var::from_tensor(&t(&[0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.05, -0.6, 0.25, 0.15, -0.35], &[3, 4])).unwrap();
    let feat = t(&[0.9, -1.1, 0.4, 2.0], &[1, 4]);
    let logits = feat.matmul(&w.as_tensor().t().unwrap()).unwrap();
    let loss = masked_multilabel_bce(&logits, &[vec![Some(1.0), None, Some(0.0)]]).unwrap();
    let g = loss.backward().unwrap();
    let gw = flat(g.get(&w).unwrap());
    assert!(gw[4..8].iter().all(|&v| v == 0.0), "unknown marker row received gradient {:?}", &gw[4..8]);
    assert!(gw[0..4].iter().any(|&v| v != 0.0) && gw[8..12].iter().any(|&v| v != 0.0));
}

fn down_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (gamma, alpha) in [(0.0, 0.25), (2.0, 0.25), (1.0, 0.7), (5.0, 0.5), (0.5, 1.0)] {
        let p = uniform(&mut rng, 64, 0.001, 0.999);
        let y: Vec<f64> = (0..64).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let f = flat(&focal_elementwise(&t(&p, &[64]), &t(&y, &[64]), gamma, alpha).unwrap());
        let b = flat(&bce_elementwise(&t(&p, &[64]), &t(&y, &[64])).unwrap());
        let bound = alpha.max(1.0 - alpha);
        for (i, (fv, bv)) in f.iter().zip(&b).enumerate() {
            assert!(*fv >= 0.0 && *fv <= bound * bv + 1e-15, "focal exceeds {bound}·bce at {i}: {fv} > {bv}");
        }
    }
}

fn loss_gradients() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LossConfig::default();
    let p = uniform(&mut rng, 8, 0.05, 0.95);
    let soft: Vec<f64> = uniform(&mut rng, 8, 0.0, 1.0);
    let hard: Vec<f64> = (0..8).map(|i| f64::from(i % 3 == 0)).collect();
    let z = uniform(&mut rng, 8, -3.0, 3.0);
    let s8 = [8usize];
    let s4 = [2usize, 1, 2, 2];
    let mut n = 0;
    n += check_input_grad("bce", &p, &s8, &|x| bce(x, &t(&soft, &s8)).unwrap());
    n += check_input_grad("bce sum", &p, &s8, &|x| bce_with(x, &t(&soft, &s8), Reduction::Sum).unwrap());
    n += check_input_grad("focal", &p, &s8, &|x| focal(x, &t(&hard, &s8), 2.0, 0.25).unwrap());
    n += check_input_grad("focal soft", &p, &s8, &|x| focal(x, &t(&soft, &s8), 1.5, 0.6).unwrap());
    n += check_input_grad("soft dice", &p, &s4, &|x| soft_dice_loss(x, &t(&hard, &s4), 1.0).unwrap());
    n += check_input_grad("compound", &p, &s4, &|x| compound_seg_loss(x, &t(&hard, &s4), &cfg).unwrap());
    n += check_input_grad("bce logits", &z, &s8, &|x| bce_logits(x, &t(&soft, &s8)).unwrap());
    n += check_input_grad("focal logits", &z, &s8, &|x| focal_logits(x, &t(&hard, &s8), 2.0, 0.25).unwrap());
    for kind in [ClassLoss::Focal, ClassLoss::Bce, ClassLoss::FocalBce] {
        let c = LossConfig { classification: kind, ..cfg.clone() };
        n += check_input_grad(&format!("{kind:?} objective"), &z, &s8, &|x| classification_loss(x, &t(&hard, &s8), &c).unwrap());
    }
    n += check_input_grad("compound logits", &z, &s4, &|x| compound_seg_loss_logits(x, &t(&hard, &s4), &cfg).unwrap());
    let labels = vec![
        vec![Some(1.0), None, Some(0.0), Some(1.0)],
        vec![None, Some(0.0), Some(1.0), None],
    ];
    n += check_input_grad("masked bce", &z, &[2, 4], &|x| masked_multilabel_bce(x, &labels).unwrap());
    n
}

fn store() -> ParamStore {
    ParamStore::new(21, DType::F64, Device::Cpu)
}

// a fixed random projection turns a block output into a scalar
fn projected(out: Tensor, seed: u64) -> Tensor {
    let n = out.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t(&uniform(&mut rng, n, -1.0, 1.0), out.dims());
    out.mul(&r).unwrap().sum_all().unwrap()
}

fn block_gradients() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut n = 0;

    let s = store();
    let cbam = Cbam::with_reduction(&s.root().pp("cbam"), 4, 2).unwrap();
    let x = uniform(&mut rng, 2 * 4 * 5 * 5, -1.0, 1.0);
    n += check_block("cbam", &s, &x, &[2, 4, 5, 5], &|x| projected(cbam.forward(x).unwrap(), 1), 6);

    let s = store();
    let gate = AttentionGate::new(&s.root().pp("gate"), 6, 4, 3).unwrap();
    let g = t(&uniform(&mut rng, 2 * 6 * 3 * 3, -1.0, 1.0), &[2, 6, 3, 3]);
    let skip = uniform(&mut rng, 2 * 4 * 6 * 6, -1.0, 1.0);
    n += check_block("attention gate", &s, &skip, &[2, 4, 6, 6], &|x| projected(gate.forward(&g, x).unwrap(), 2), 6);
    let sk = t(&skip, &[2, 4, 6, 6]);
    n += check_input_grad("attention gate gating", &flat(&g), &[2, 6, 3, 3], &|x| projected(gate.forward(x, &sk).unwrap(), 2));

    let s = store();
    let sa = SelfAttention::new(&s.root().pp("sa"), 8).unwrap();
    let (_, gamma) = s.named_trainable().into_iter().find(|(k, _)| k.ends_with("gamma")).expect("gamma parameter");
    gamma.set(&t(&[0.7], &[1])).unwrap();
    let x = uniform(&mut rng, 2 * 8 * 3 * 3, -1.0, 1.0);
    n += check_block("self-attention", &s, &x, &[2, 8, 3, 3], &|x| projected(sa.forward(x).unwrap(), 3), 6);

    let s = store();
    let se = SqueezeExcite::new(&s.root().pp("se"), 6, 2).unwrap();
    let x = uniform(&mut rng, 2 * 6 * 4 * 4, -1.0, 1.0);
    n += check_block("squeeze-excite", &s, &x, &[2, 6, 4, 4], &|x| projected(se.forward(x).unwrap(), 4), 6);
    n
}

pub fn run() -> String {
    hand_values();
    down_weighting();
    let l = loss_gradients();
    let b = block_gradients();
    format!("hand values within 1e-6; {l} loss and {b} attention-block partials match finite differences at rel {RTOL:e}")
}
