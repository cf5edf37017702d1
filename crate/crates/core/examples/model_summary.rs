//! Prints the shape trace and parameter counts of the network and times one
//! training step on random input.
//!
//! cargo run --release --example model_summary -- [base_filters] [batch]

use std::time::Instant;

use microcrack::gradnet::{Mode, Tensor};
use microcrack::model::{MicroCrackNet, ModelConfig, REFERENCE_TOTAL_PARAMS};
use rand::{Rng, SeedableRng};

fn main() -> microcrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let base_filters = args.next().map_or(16, |a| a.parse().expect("base_filters"));
    let batch: usize = args.next().map_or(2, |a| a.parse().expect("batch"));
    let cfg = ModelConfig {
        base_filters,
        ..ModelConfig::default()
    };
    let mut net = MicroCrackNet::<f32>::build(&cfg, 1)?;
    for (stage, shape) in net.shape_trace() {
        println!("{stage:<12} {shape:?}");
    }
    let (trainable, non_trainable) = net.count_params();
    println!("trainable {trainable}, non-trainable {non_trainable} (reference total {REFERENCE_TOTAL_PARAMS})");

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let [t, s, c] = cfg.input_shape;
    let x = Tensor::from_fn(&[batch, t, s, c], |_| rng.gen_range(-1.0f32..1.0));
    let t0 = Instant::now();
    let y = net.forward(&x, Mode::Train)?;
    let t1 = Instant::now();
    net.backward_params(&Tensor::full(y.shape(), 1.0))?;
    let t2 = Instant::now();
    println!(
        "batch {batch}: forward {:.3}s backward {:.3}s",
        (t1 - t0).as_secs_f64(),
        (t2 - t1).as_secs_f64()
    );
    Ok(())
}
