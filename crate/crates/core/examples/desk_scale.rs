//! Train/test generalization run at reduced or full scale.
//!
//! `cargo run --release --example desk_scale -- [quarter|desk] [epochs] [dir]`

use std::path::PathBuf;

use microcrack::experiment::{run, Preset};
use microcrack::metrics::DEFAULT_THRESHOLDS;

fn main() -> microcrack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut preset = match args.first().map(String::as_str) {
        Some("desk") => Preset::desk(),
        _ => Preset::quarter(),
    };
    if let Some(e) = args.get(1) {
        preset.train.epochs = e.parse().expect("epochs");
    }
    let dir = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("microcrack_desk"));
    println!(
        "{} train / {} test, base_filters {}, {} epochs, data in {}",
        preset.n_train,
        preset.n_test,
        preset.model.base_filters,
        preset.train.epochs,
        dir.display()
    );
    let out = run(&preset, &dir, &DEFAULT_THRESHOLDS, |e| {
        println!(
            "epoch {:>3}  train {:.5}  ({:.1} s)",
            e.epoch, e.train_loss, e.seconds
        )
    })?;
    println!("data generation {:.1} s", out.generation_seconds);
    print!("{}", out.log.summary());
    print!("{}", out.evaluation.report.to_table());
    println!(
        "test IoU {:.4} over {} cracks with >= 4 pixels; constant-box baseline {:.4}",
        out.test_iou, out.scored_count, out.baseline_iou
    );
    Ok(())
}
