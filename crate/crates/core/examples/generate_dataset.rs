//! Generates a small CWF1 dataset and prints the crack-size histogram.
//!
//! `cargo run --release --example generate_dataset -- [n] [seed] [out]`

use std::path::PathBuf;
use std::time::Instant;

use microcrack::dataset::{generate_dataset, Dataset};
use microcrack::wavesim::{CrackSampler, LatticeConfig, SourceSpec};

fn main() -> microcrack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(4, |s| s.parse().expect("n"));
    let seed: u64 = args.get(1).map_or(7, |s| s.parse().expect("seed"));
    let out = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("microcrack_example.cwf1"));

    let cfg = LatticeConfig {
        seed,
        ..LatticeConfig::default()
    };
    let t0 = Instant::now();
    let summary = generate_dataset(
        n,
        &cfg,
        &CrackSampler::default(),
        &SourceSpec::default(),
        &out,
    )?;
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "{} samples -> {} ({} bytes) in {secs:.1} s ({:.2} s/sample)",
        summary.n_samples,
        out.display(),
        summary.file_len,
        secs / n as f64
    );
    for (i, c) in summary.histogram(0.15, 0.5, 7).iter().enumerate() {
        let lo = 0.15 + 0.05 * i as f64;
        println!("  length [{lo:.2}, {:.2}): {c}", lo + 0.05);
    }

    let ds = Dataset::load(&out)?;
    let s = &ds.samples[0];
    println!(
        "sample 0: crack ({:.3},{:.3})-({:.3},{:.3}) width {:.4}, {} mask pixels, box {:?}",
        s.crack.p0[0],
        s.crack.p0[1],
        s.crack.p1[0],
        s.crack.p1[1],
        s.crack.width,
        s.mask.count_ones(),
        s.target()?.map(|b| b.to_array())
    );
    Ok(())
}
