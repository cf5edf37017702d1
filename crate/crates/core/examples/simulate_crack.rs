//! Simulates one cracked plate and one intact plate and compares sensor traces.
//!
//! `cargo run --release --example simulate_crack`

use microcrack::wavesim::{
    build_lattice, simulate_observed, CrackSpec, LatticeConfig, SourceSpec, N_SENSORS,
};

fn main() -> microcrack::Result<()> {
    let cfg = LatticeConfig::default();
    let src = SourceSpec::default();
    let crack = CrackSpec::segment([0.3, 0.45], [0.42, 0.62], 0.01);
    let lattice = build_lattice(&cfg, &crack)?;
    let intact_lattice = build_lattice(&cfg, &CrackSpec::none())?;

    let mut energy = Vec::new();
    let cracked = simulate_observed(&lattice, &src, &cfg, |sim| {
        if sim.steps_taken() % 250 == 0 {
            energy.push((sim.steps_taken(), sim.time(), sim.total_energy()));
        }
    })?;
    let intact = simulate_observed(&intact_lattice, &src, &cfg, |_| {})?;

    println!(
        "{}x{} lattice, dt {}, {} steps, source active until t = {:.2}",
        cfg.grid_nx,
        cfg.grid_ny,
        cfg.dt,
        cfg.n_steps,
        src.active_until()
    );
    println!("crack length {:.3}, width {}", crack.size(), crack.width);
    for (k, t, e) in energy {
        println!("  step {k:>4}  t {t:>6.1}  energy {e:.6e}");
    }
    let reach = lattice.crack_reach_steps(&src).unwrap_or(0);
    println!("wavefront reaches the crack after {reach} steps");

    let probe = N_SENSORS / 4;
    println!("sensor {probe} x-displacement, cracked vs intact:");
    for k in (0..cfg.n_steps).step_by(200) {
        println!(
            "  {k:>4}  {:>12.4e}  {:>12.4e}",
            cracked.at(k, probe, 0),
            intact.at(k, probe, 0)
        );
    }
    let diff = cracked
        .field
        .iter()
        .zip(&intact.field)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "max |cracked - intact| = {diff:.3e} (peak {:.3e})",
        intact.max_abs()
    );
    Ok(())
}
