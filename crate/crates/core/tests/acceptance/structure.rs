//! Attention fixed points, builder shape contracts and the ablation grids.

use candle_core::{DType, Device, Tensor};
use cystonet::nn::{AttentionGate, Cbam, Ctx, Model, ModelConfig, ParamStore, SelfAttention, Task};
use cystonet::synth::{generate, SynthSpec};
use cystonet::train::ablate::{segmentation_base, segmentation_zoo, CLASSIFICATION_ROWS, SEGMENTATION_ROWS};
use cystonet::train::{ablate, fold_indices, Dataset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn zero_matching(store: &ParamStore, pattern: &str) -> usize {
    let mut n = 0;
    for (name, var) in store.named_trainable() {
        if name.contains(pattern) {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            n += 1;
        }
    }
    n
}

fn fixed_points() {
    let store = ParamStore::new(4, DType::F32, Device::Cpu);
    let cbam = Cbam::new(&store.root().pp("cbam"), 32).unwrap();
    assert!(zero_matching(&store, "cbam") >= 4);
    let x = random(&[2, 32, 7, 7], 1);
    let want: Vec<f32> = values(&x).iter().map(|v| v * 0.25).collect();
    assert_eq!(values(&cbam.forward(&x).unwrap()), want, "zeroed CBAM is not 0.25·x");

    let store = ParamStore::new(5, DType::F32, Device::Cpu);
    let gate = AttentionGate::new(&store.root().pp("gate"), 16, 8, 4).unwrap();
    assert_eq!(zero_matching(&store, "psi"), 2);
    let g = random(&[2, 16, 4, 4], 2);
    let skip = random(&[2, 8, 8, 8], 3);
    let want: Vec<f32> = values(&skip).iter().map(|v| v * 0.5).collect();
    assert_eq!(values(&gate.forward(&g, &skip).unwrap()), want, "gate with zero psi is not 0.5·skip");

    let store = ParamStore::new(6, DType::F32, Device::Cpu);
    let sa = SelfAttention::new(&store.root().pp("sa"), 16).unwrap();
    assert_eq!(values(&sa.gamma), vec![0.0]);
    let x = random(&[2, 16, 4, 4], 4);
    assert_eq!(values(&sa.forward(&x).unwrap()), values(&x), "self-attention at gamma 0 is not the identity");
}

fn shape_contracts() -> usize {
    let mut checked = 0;
    let x = random(&[2, 3, 64, 64], 5);
    for (task, want) in [(Task::Classify, vec![2, 1]), (Task::Subtype, vec![2, 3]), (Task::Segment, vec![2, 1, 64, 64])] {
        let m = Model::build(&ModelConfig::for_task(task).toy(), 0).unwrap();
        assert_eq!(m.forward(&x, &Ctx::eval()).unwrap().dims(), want.as_slice(), "{task} output shape");
        let p = m.predict(&x).unwrap();
        assert!(values(&p).iter().all(|v| (0.0..=1.0).contains(v)), "{task} probabilities outside [0, 1]");
        assert!(m.forward(&random(&[1, 3, 60, 64], 6), &Ctx::eval()).is_err(), "{task} accepts a side that is not a stride multiple");
        assert!(m.forward(&random(&[1, 1, 64, 64], 7), &Ctx::eval()).is_err(), "{task} accepts one channel");
        let full = Model::build(&ModelConfig::for_task(task), 0).unwrap();
        assert!(full.num_parameters() > 10 * m.num_parameters(), "{task}: full model not larger than toy");
        checked += 1;
    }
    let wide = random(&[1, 3, 64, 96], 8);
    for (name, cfg) in segmentation_zoo() {
        let m = Model::build(&cfg.toy(), 0).unwrap();
        assert_eq!(m.forward(&wide, &Ctx::eval()).unwrap().dims(), &[1, 1, 64, 96], "{name} mask shape");
        checked += 1;
    }
    let mut plain = ModelConfig::classifier().toy();
    plain.use_cbam = false;
    assert_eq!(Model::build(&plain, 0).unwrap().forward(&x, &Ctx::eval()).unwrap().dims(), &[2, 1]);
    checked + 1
}

fn toy_data(task: Task) -> (Dataset, Dataset) {
    let samples = generate(&SynthSpec::new(task, 32, 64, 3)).unwrap();
    let d = Dataset::from_synth(task, 64, &samples).unwrap();
    let (tr, va) = &fold_indices(&d, 4, 3).unwrap()[0];
    (d.subset(tr), d.subset(va))
}

fn ablation_grids() -> (usize, usize) {
    let (m, t) = segmentation_base();
    let t = TrainConfig { epochs: 2, ..t };
    let (tr, va) = toy_data(Task::Segment);
    let rows: Vec<String> = SEGMENTATION_ROWS.iter().map(|s| s.to_string()).collect();
    let seg = ablate(&m.toy(), &t, &rows, &tr, &va).unwrap();
    let names: Vec<&str> = seg.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        ["base", "cutmix", "mixup", "attgate", "attgate+mixup", "selfatt", "selfatt+attgate", "selfatt+attgate+mixup"]
    );
    assert!(seg.rows.iter().all(|r| r.report.epochs_run == 2 && r.report.metrics.get("dice").is_some()));

    let t = TrainConfig { epochs: 2, ..TrainConfig::for_task(Task::Classify) };
    let (tr, va) = toy_data(Task::Classify);
    let rows: Vec<String> = CLASSIFICATION_ROWS.iter().map(|s| s.to_string()).collect();
    let cls = ablate(&ModelConfig::classifier().toy(), &t, &rows, &tr, &va).unwrap();
    assert_eq!(cls.rows.len(), 4);
    assert!(cls.rows.iter().all(|r| r.report.epochs_run == 2 && r.report.metrics.get("auc").is_some()));
    assert!(!cls.rows[1].report.model.use_cbam);
    (seg.rows.len(), cls.rows.len() - 1)
}

pub fn run() -> String {
    fixed_points();
    let shapes = shape_contracts();
    let (seg, cls) = ablation_grids();
    format!("fixed points bit-exact; {shapes} builder shape contracts; {seg} segmentation rows and {cls} classification toggles completed 2 toy epochs")
}
