//! Pretrains on a synthetic cluster dataset in each neighbor mode and
//! compares kNN accuracy of the learned encoder with a random-init one.
//!
//! cargo run --release -p snclr --example desk_benchmark -- [seeds] [run-config.toml]

use std::time::Instant;

use snclr::eval_probe::knn_probe;
use snclr::io::{Dataset, RunConfig};
use snclr::model::{encode, init_model, StackConfig};
use snclr::objective::NeighborMode;
use snclr::pipeline::{pretrain, AugmentConfig, TrainConfig};
use snclr::synth::{generate, SynthConfig};

const KNN_K: usize = 20;

fn knn(params: &snclr::model::ParamSet, train: &Dataset, test: &Dataset) -> f64 {
    let a = encode(params, &train.features).unwrap();
    let b = encode(params, &test.features).unwrap();
    knn_probe(&a, &train.labels, &b, &test.labels, KNN_K).unwrap().accuracy
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let run = match args.get(2) {
        Some(p) => RunConfig::load(std::path::Path::new(p)).unwrap(),
        None => RunConfig::default(),
    };
    let stack: StackConfig = run.model.clone();
    let aug: AugmentConfig = run.augment.clone();
    let modes = [
        NeighborMode::Both,
        NeighborMode::None,
        NeighborMode::PositiveOnly,
        NeighborMode::NegativeOnly,
    ];
    let mut sums = [0.0; 4];
    let mut rand_sum = 0.0;
    let mut raw_sum = 0.0;
    for seed in 0..seeds {
        let ds = generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let (train, test) = ds.split_every(5);
        let raw = knn_probe(&train.features, &train.labels, &test.features, &test.labels, KNN_K)
            .unwrap()
            .accuracy;
        let init = init_model(&stack, seed).unwrap();
        let r = knn(&init.online, &train, &test);
        raw_sum += raw;
        rand_sum += r;
        print!("seed {seed}: raw {raw:.3} random {r:.3}");
        for (mi, mode) in modes.iter().enumerate() {
            let mut cfg = TrainConfig { seed, ..run.train.clone() };
            cfg.loss.neighbor_mode = *mode;
            let t = Instant::now();
            let out = pretrain(&train, &stack, &cfg, &aug).unwrap();
            let acc = knn(&out.model.online, &train, &test);
            sums[mi] += acc;
            let first = out.metrics.iter().find_map(|m| m.neighbor_purity).unwrap_or(0.0);
            let last = out.metrics.iter().rev().find_map(|m| m.neighbor_purity).unwrap_or(0.0);
            print!(
                " | {mode:?} {acc:.3} (purity {first:.3}->{last:.3}, {:.1}s)",
                t.elapsed().as_secs_f64()
            );
        }
        println!();
    }
    let n = seeds as f64;
    println!(
        "mean: raw {:.4} random {:.4} both {:.4} none {:.4} positive_only {:.4} negative_only {:.4}",
        raw_sum / n,
        rand_sum / n,
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    );
}
