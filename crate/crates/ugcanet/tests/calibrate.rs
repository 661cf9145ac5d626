//! Scratch calibration runs (ignored by default; run explicitly).

use ugcanet::data::synth::{synth_dataset, TaskMix};
use ugcanet::nn::heads::weighted_bce_iou_loss;
use ugcanet::nn::model::{ModelConfig, UgcaNet};
use ugcanet::opt::{Adam, LrSchedule};
use ugcanet::tensor::Graph;
use ugcanet::train::{predict, score, train, Aggregate, TrainConfig};

#[test]
#[ignore]
fn calibrate_desk_learning() {
    let t0 = std::time::Instant::now();
    let samples = synth_dataset(64, 64, TaskMix::seg_only(), 1);
    let (train_idx, test_idx) = ugcanet::train::split_indices(samples.len(), 0.8, 1);
    let train_set: Vec<_> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test_set: Vec<_> = test_idx.iter().map(|&i| samples[i].clone()).collect();

    for model_seed in [1u64, 2, 3] {
        let mut model = UgcaNet::new(ModelConfig::tiny(), model_seed).unwrap();
        let cfg = TrainConfig { batch: 16, ..TrainConfig::desk(model_seed) };
        let curve = train(&mut model, &train_set, &cfg, LrSchedule::Constant).unwrap();
        let preds = predict(&model, &test_set, 64).unwrap();
        let report = score(&test_set, &preds, Aggregate::PerImage).unwrap();
        println!(
            "model seed {model_seed}: final loss {:.4}, held-out dice {:.4} ({:?})",
            curve.last().unwrap().loss,
            report.seg.as_ref().unwrap().dice,
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn calibrate_overfit_single_sample() {
    let t0 = std::time::Instant::now();
    for seed in [1u64, 2, 3, 4, 5] {
        let samples = synth_dataset(1, 64, TaskMix::seg_only(), seed);
        let sample = &samples[0];
        let mask = sample.mask.clone().unwrap();
        let mut model = UgcaNet::new(ModelConfig::tiny(), seed).unwrap();
        let mut adam = Adam::new(1e-4, model.store.len());
        let mut losses = Vec::new();
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.input(sample.image.clone().reshaped([1, 3, 64, 64]).unwrap());
            let outputs = model.forward(&mut g, x).unwrap();
            let loss = weighted_bce_iou_loss(&mut g, outputs.seg_logits, &mask).unwrap();
            losses.push(g.data(loss)[0]);
            g.backward(loss).unwrap();
            adam.step(&mut model.store, &g, 1.0);
        }
        let monotone50 = losses.windows(2).take(49).all(|w| w[1] <= w[0]);
        println!(
            "seed {seed}: step0 {:.4} step50 {:.4} step150 {:.4} step299 {:.4} monotone-first-50 {monotone50} ({:?})",
            losses[0], losses[50], losses[150], losses[299], t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn calibrate_multitask_accuracy() {
    let t0 = std::time::Instant::now();
    let samples = synth_dataset(96, 64, TaskMix::all_tasks(), 1);
    let (train_idx, test_idx) = ugcanet::train::split_indices(samples.len(), 0.8, 1);
    let train_set: Vec<_> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test_set: Vec<_> = test_idx.iter().map(|&i| samples[i].clone()).collect();
    for seed in [1u64, 2, 3] {
        let mut model = UgcaNet::new(ModelConfig::tiny(), seed).unwrap();
        let cfg = TrainConfig {
            batch: 16,
            steps: 500,
            ..TrainConfig::desk(seed)
        };
        train(&mut model, &train_set, &cfg, LrSchedule::Constant).unwrap();
        let preds = predict(&model, &test_set, 64).unwrap();
        let report = score(&test_set, &preds, Aggregate::PerImage).unwrap();
        println!(
            "seed {seed}: pos {:.3} le {:.3} hp {:.3} dice {:.3} ({:?})",
            report.pos_accuracy.unwrap(),
            report.le_accuracy.unwrap(),
            report.hp_accuracy.unwrap(),
            report.seg.unwrap().dice,
            t0.elapsed()
        );
    }
}
