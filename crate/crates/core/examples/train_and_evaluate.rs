//! Trains a narrow network on a small generated set, then scores a held-out set.
//!
//! `cargo run --release --example train_and_evaluate -- [n_train] [epochs]`

use microcrack::dataset::{generate_dataset, Dataset};
use microcrack::metrics::DEFAULT_THRESHOLDS;
use microcrack::model::{MicroCrackNet, ModelConfig};
use microcrack::train::{evaluate, train, TrainConfig};
use microcrack::wavesim::{CrackSampler, LatticeConfig, SourceSpec};

fn main() -> microcrack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_train: usize = args.first().map_or(32, |s| s.parse().expect("n_train"));
    let epochs: usize = args.get(1).map_or(10, |s| s.parse().expect("epochs"));
    let dir = std::env::temp_dir().join("microcrack_train_example");
    std::fs::create_dir_all(&dir)?;

    let make = |name: &str, n: usize, seed: u64| -> microcrack::Result<Dataset> {
        let cfg = LatticeConfig {
            seed,
            ..LatticeConfig::default()
        };
        let path = dir.join(name);
        generate_dataset(
            n,
            &cfg,
            &CrackSampler::default(),
            &SourceSpec::default(),
            &path,
        )?;
        Dataset::load(&path)
    };
    let train_set = make("train.cwf1", n_train, 100)?;
    let test_set = make("test.cwf1", 8, 200)?;

    let model = ModelConfig {
        base_filters: 8,
        ..ModelConfig::default()
    };
    let mut net = MicroCrackNet::<f32>::build(&model, 1)?;
    let (trainable, frozen) = net.count_params();
    println!("{trainable} trainable, {frozen} non-trainable parameters");

    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let log = train(&mut net, &train_set, &cfg, Some(&dir.join("run")), |e| {
        println!(
            "epoch {:>3}  train {:.5}  ({:.1} s)",
            e.epoch, e.train_loss, e.seconds
        );
    })?;
    println!("{}", log.summary());

    let ev = evaluate(&mut net, &test_set, &DEFAULT_THRESHOLDS, 1.0)?;
    print!("{}", ev.report.to_table());
    Ok(())
}
