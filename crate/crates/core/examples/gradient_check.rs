//! Runs the finite-difference gradient suites and prints one line per layer.
//!
//! `cargo run --release --example gradient_check -- [suite]`

use microcrack::gradnet::gradcheck::{run_suite, SUITES};

fn main() -> microcrack::Result<()> {
    let only = std::env::args().nth(1);
    let mut failed = 0;
    for name in SUITES
        .iter()
        .filter(|s| only.as_deref().is_none_or(|o| o == **s))
    {
        let report = run_suite(name)?;
        failed += usize::from(!report.passed());
        println!("{report}");
    }
    if failed > 0 {
        println!("{failed} suites failed");
        std::process::exit(1);
    }
    Ok(())
}
