//! Toy-scale learning on the synthetic blob corpus.

use cystonet::nn::{Model, ModelConfig, Task};
use cystonet::synth::{generate, SynthSpec};
use cystonet::train::{evaluate, fit, fold_indices, Dataset, Selection, TrainConfig};

const IMAGES: usize = 200;
const SIDE: usize = 64;
const EPOCHS: usize = 30;
const SEED: u64 = 7;

fn corpus(task: Task, images: usize, seed: u64) -> Dataset {
    let samples = generate(&SynthSpec::new(task, images, SIDE, seed)).unwrap();
    Dataset::from_synth(task, SIDE, &samples).unwrap()
}

// first patient-grouped fold: 160 training and 40 validation images
fn split(d: &Dataset) -> (Dataset, Dataset) {
    let (tr, va) = &fold_indices(d, 5, SEED).unwrap()[0];
    (d.subset(tr), d.subset(va))
}

fn config(task: Task, target: Option<f64>) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        lr0: 1e-3,
        seed: SEED,
        selection: Selection::Metric,
        target_metric: target,
        ..TrainConfig::for_task(task)
    }
}

fn train(task: Task, train: &Dataset, val: &Dataset, target: Option<f64>) -> (Model, f64, usize) {
    let model = Model::build(&ModelConfig::for_task(task).toy(), SEED).unwrap();
    let (_, report) = fit(&model, train, val, &config(task, target)).unwrap();
    let metric = report.metrics.get(cystonet::train::fit::headline_metric(task)).unwrap();
    (model, metric, report.epochs_run)
}

pub fn run() -> String {
    let cls = corpus(Task::Classify, IMAGES, SEED);
    let (tr, va) = split(&cls);
    let (_, auc, auc_epochs) = train(Task::Classify, &tr, &va, Some(0.95));
    assert!(auc >= 0.95, "classifier val AUC {auc:.4} < 0.95 after {auc_epochs} epochs");

    let seg = corpus(Task::Segment, IMAGES, SEED + 1);
    let (tr_s, va_s) = split(&seg);
    let (_, dice, dice_epochs) = train(Task::Segment, &tr_s, &va_s, Some(0.85));
    assert!(dice >= 0.85, "segmenter val Dice {dice:.4} < 0.85 after {dice_epochs} epochs");

    // Shuffled training labels carry no signal, so the model must score at
    // chance against the true labels of held-out images. A large fresh
    // corpus keeps the null spread of the AUC near 0.03.
    let shuffled = tr.with_shuffled_labels(SEED);
    let (model, _, null_epochs) = train(Task::Classify, &shuffled, &va, None);
    let holdout = corpus(Task::Classify, 400, SEED + 100);
    let cfg = TrainConfig::for_task(Task::Classify);
    let (report, _) = evaluate(&model, &holdout, 32, &cfg.loss, 0.5).unwrap();
    let null_auc = report.get("auc").unwrap();
    assert!(
        (0.35..=0.65).contains(&null_auc),
        "shuffled-label AUC {null_auc:.4} outside [0.35, 0.65]"
    );
    format!(
        "classifier AUC {auc:.3} ({auc_epochs} epochs), segmenter Dice {dice:.3} ({dice_epochs} epochs), shuffled-label AUC {null_auc:.3} ({null_epochs} epochs)"
    )
}
