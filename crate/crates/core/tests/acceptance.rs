//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `MCPN_ACCEPT_ONLY=1,5` limits the run to the listed criteria.
//! `MCPN_FULL_SCALE=1` adds the 512/128 generalization run (hours).

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use sha2::{Digest, Sha256};

use microcrack::dataset::{generate_dataset, Dataset};
use microcrack::experiment::{self, Preset};
use microcrack::gradnet::gradcheck;
use microcrack::gradnet::{Layer, Tensor};
use microcrack::labels::{mask_to_keypoints, KeypointBox, Mask};
use microcrack::losses::{huber, huber_element, mae, mse, LossKind};
use microcrack::metrics::{integrity, iou, overlap_area, purity, DEFAULT_THRESHOLDS};
use microcrack::model::{MicroCrackNet, ModelConfig, REFERENCE_TOTAL_PARAMS};
use microcrack::rng::stream_rng;
use microcrack::train::{evaluate, train, TrainConfig};
use microcrack::wavesim::{
    build_lattice, simulate, simulate_observed, CrackSampler, CrackSpec, LatticeConfig,
    LatticeState, SourceSpec, WaveSample, N_SENSORS,
};

type Check = Result<String, String>;
/// Per-epoch losses, final checkpoint bytes and raw predictions of one run.
type RunTrace = (Vec<f64>, Vec<u8>, Vec<[f64; 4]>);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn shape_contract() -> Check {
    let net = MicroCrackNet::<f32>::build(&ModelConfig::default(), 0).map_err(err)?;
    let get = |n: &str| {
        net.shape_trace()
            .iter()
            .find(|(s, _)| s == n)
            .map(|(_, v)| v.clone())
            .ok_or(format!("no stage {n}"))
    };
    ensure(get("input")? == [2000, 81, 2], "input shape")?;
    ensure(get("time_pool")? == [500, 81, 2], "time pool shape")?;
    let times: Vec<usize> = ["time_pool", "pool1", "pool2", "pool3", "pool4"]
        .iter()
        .map(|s| get(s).map(|v| v[0]))
        .collect::<Result<_, _>>()?;
    ensure(
        times == [500, 250, 125, 62, 31],
        format!("time axis {times:?}"),
    )?;
    ensure(
        get("reduction")? == [1, 5, 128],
        "reduction must consume all 31 steps",
    )?;
    ensure(get("output")? == [4], "output")?;
    Ok(format!(
        "(2000,81,2)->(500,81,2), time {}, (31,1) kernel -> {:?}, {} stages",
        times
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(">"),
        get("reduction")?,
        net.shape_trace().len()
    ))
}

fn gradient_suite() -> Check {
    let reports = gradcheck::run_all().map_err(err)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.to_string())
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(
        reports.iter().any(|r| r.name == "conv_block"),
        "conv block suite missing",
    )?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    Ok(format!(
        "{} suites in f64, worst {} at {:.2e} < 1e-6",
        reports.len(),
        worst.name,
        worst.max_rel_error
    ))
}

/// Pixel-center count of `[x0,x1)x[y0,y1)` boxes on an `n x n` unit grid.
fn raster_iou(a: &KeypointBox, b: &KeypointBox, n: usize) -> f64 {
    let inside =
        |k: &KeypointBox, x: f64, y: f64| x > k.x_min && x < k.x_max && y > k.y_min && y < k.y_max;
    let (mut ua, mut ub, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            ua += p as usize;
            ub += q as usize;
            both += (p && q) as usize;
        }
    }
    let union = ua + ub - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

fn metric_oracle() -> Check {
    let mut rng = stream_rng(1, "acceptance-metrics", 0);
    let n = 40;
    let int_box = |rng: &mut rand_chacha::ChaCha8Rng| {
        let (x0, y0) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (x1, y1) = (rng.gen_range(x0 + 1..=n), rng.gen_range(y0 + 1..=n));
        KeypointBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    };
    for k in 0..200 {
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        let (analytic, pixels) = (iou(&a, &b), raster_iou(&a, &b, n));
        ensure(
            analytic == pixels,
            format!("pair {k}: {analytic} vs {pixels}"),
        )?;
    }
    let mut worst = 0.0f64;
    let mut pairs = 0;
    while pairs < 1000 {
        let r = |rng: &mut rand_chacha::ChaCha8Rng| {
            let (p, q) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            (f64::min(p, q), f64::max(p, q))
        };
        let ((ax0, ax1), (ay0, ay1), (bx0, bx1), (by0, by1)) =
            (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
        let (a, b) = (
            KeypointBox::new(ax0, ay0, ax1, ay1),
            KeypointBox::new(bx0, by0, bx1, by1),
        );
        if overlap_area(&a, &b) <= 0.0 {
            continue;
        }
        pairs += 1;
        let lhs = 1.0 / iou(&a, &b);
        let rhs = 1.0 / purity(&a, &b) + 1.0 / integrity(&a, &b) - 1.0;
        worst = worst.max((lhs - rhs).abs() / lhs.max(1.0));
    }
    ensure(worst < 1e-9, format!("decomposition error {worst:e}"))?;
    Ok(format!(
        "200 integer-aligned pairs exact vs raster; decomposition worst {worst:.1e} over 1000 overlapping pairs"
    ))
}

fn loss_identities() -> Check {
    for delta in [0.1, 0.5, 1.0, 1.7, 3.0] {
        let quadratic = huber_element(delta, delta).0;
        let linear = delta * (delta - 0.5 * delta);
        ensure(
            quadratic == linear,
            format!("knot value at {delta}: {quadratic} vs {linear}"),
        )?;
        ensure(
            huber_element(-delta, delta) == (quadratic, -delta),
            "knot symmetry",
        )?;
    }
    let mut rng = stream_rng(2, "acceptance-losses", 0);
    for _ in 0..200 {
        let p = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let t = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let max_err = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let m = mse(&p, &t).map_err(err)?.0;
        let h = huber(&p, &t, max_err * rng.gen_range(1.0..3.0))
            .map_err(err)?
            .0;
        ensure(h == m / 2.0, format!("huber {h} vs mse/2 {}", m / 2.0))?;
        for kind in [LossKind::Mse, LossKind::Mae, LossKind::Huber { delta: 0.3 }] {
            ensure(
                kind.eval(&p, &p).map_err(err)?.0 == 0.0,
                "loss of identical tensors",
            )?;
            ensure(
                kind.eval(&p, &t).map_err(err)?.0 > 0.0,
                "loss of distinct tensors",
            )?;
        }
    }
    let z = Tensor::<f64>::zeros(&[1, 4]);
    let mut one = z.clone();
    one.data_mut()[2] = 1e-300;
    ensure(
        mae(&one, &z).map_err(err)?.0 > 0.0,
        "mae must see a tiny difference",
    )?;
    Ok("knot continuity exact for 5 deltas; huber == mse/2 on 200 sets; zero iff equal".into())
}

fn simulate_with(crack: &CrackSpec, src: &SourceSpec) -> Result<WaveSample, String> {
    let cfg = LatticeConfig::default();
    simulate(&build_lattice(&cfg, crack).map_err(err)?, src, &cfg).map_err(err)
}

fn simulator_physics() -> Check {
    let cfg = LatticeConfig::default();
    let src = SourceSpec::default();
    let crack = CrackSpec::segment([0.3, 0.45], [0.42, 0.62], 0.01);

    let state = build_lattice(&cfg, &crack).map_err(err)?;
    let quiet_from = (src.active_until() / cfg.dt).ceil() as usize;
    let mut energies = Vec::new();
    let cracked = simulate_observed(&state, &src, &cfg, |sim| {
        if sim.steps_taken() >= quiet_from {
            energies.push(sim.total_energy());
        }
    })
    .map_err(err)?;
    let e0 = energies[0];
    let drift = energies
        .iter()
        .map(|e| (e - e0).abs() / e0)
        .fold(0.0, f64::max);
    ensure(drift < 1e-3, format!("energy drift {drift:e}"))?;

    let mirrored = simulate_with(&crack.mirrored_x(), &src.mirrored_x())?;
    let mut mirror = 0.0f64;
    for k in 0..cracked.n_steps {
        for s in 0..N_SENSORS {
            let m = LatticeState::mirrored_sensor(s);
            mirror = mirror.max((cracked.at(k, s, 0) + mirrored.at(k, m, 0)).abs());
            mirror = mirror.max((cracked.at(k, s, 1) - mirrored.at(k, m, 1)).abs());
        }
    }
    mirror /= cracked.max_abs();
    ensure(mirror < 1e-9, format!("mirror error {mirror:e}"))?;

    let scaled = simulate_with(
        &crack,
        &SourceSpec {
            amplitude: 2.5,
            ..src
        },
    )?;
    let lin = cracked
        .field
        .iter()
        .zip(&scaled.field)
        .map(|(a, b)| (2.5 * a - b).abs())
        .fold(0.0, f64::max)
        / scaled.max_abs();
    ensure(lin < 1e-9, format!("linearity error {lin:e}"))?;

    let reach = state
        .crack_reach_steps(&src)
        .ok_or("crack breaks no bond")?;
    let intact = simulate_with(&CrackSpec::none(), &src)?;
    let per_step = N_SENSORS * 2;
    ensure(
        cracked.field[..reach * per_step] == intact.field[..reach * per_step],
        "traces differ before the wavefront reaches the crack",
    )?;
    let first_diff = (reach..cfg.n_steps)
        .find(|&k| {
            (0..per_step).any(|i| {
                (cracked.field[k * per_step + i] - intact.field[k * per_step + i]).abs() > 0.0
            })
        })
        .ok_or("crack never changes the traces")?;
    Ok(format!(
        "drift {drift:.1e}, mirror {mirror:.1e}, linearity {lin:.1e}, identical for {reach} steps, first change at step {first_diff}"
    ))
}

/// Projection-based reference: occupied rows/columns, then a one-pixel margin.
fn reference_box(mask: &Mask) -> Option<KeypointBox> {
    let (h, w) = (mask.height(), mask.width());
    let rows: Vec<bool> = (0..h)
        .map(|r| (0..w).any(|c| mask.get(r, c) == 1))
        .collect();
    let cols: Vec<bool> = (0..w)
        .map(|c| (0..h).any(|r| mask.get(r, c) == 1))
        .collect();
    let r0 = rows.iter().position(|&b| b)?;
    let r1 = h - 1 - rows.iter().rev().position(|&b| b)?;
    let c0 = cols.iter().position(|&b| b)?;
    let c1 = w - 1 - cols.iter().rev().position(|&b| b)?;
    let lo = |i: usize| if i == 0 { 0 } else { i - 1 };
    Some(KeypointBox::new(
        lo(c0) as f64 / w as f64,
        lo(r0) as f64 / h as f64,
        usize::min(c1 + 2, w) as f64 / w as f64,
        usize::min(r1 + 2, h) as f64 / h as f64,
    ))
}

fn label_rules() -> Check {
    let mut rng = stream_rng(3, "acceptance-labels", 0);
    for k in 0..500 {
        let density = rng.gen_range(0.01..0.3);
        let data: Vec<u8> = (0..256).map(|_| u8::from(rng.gen_bool(density))).collect();
        let mask = Mask::from_raw(16, 16, data).map_err(err)?;
        let got = mask_to_keypoints(&mask).map_err(err)?;
        ensure(
            got == reference_box(&mask),
            format!("mask {k} disagrees with the reference"),
        )?;
        if let Some(b) = got {
            ensure(
                b.to_array().iter().all(|v| (0.0..=1.0).contains(v)),
                "box leaves [0,1]",
            )?;
            for (r, c) in mask.ones() {
                let (x0, x1) = (c as f64 / 16.0, (c + 1) as f64 / 16.0);
                let (y0, y1) = (r as f64 / 16.0, (r + 1) as f64 / 16.0);
                ensure(
                    b.x_min <= x0 && x1 <= b.x_max && b.y_min <= y0 && y1 <= b.y_max,
                    "pixel outside box",
                )?;
            }
        }
    }
    let mut worked = Mask::zeros(16, 16);
    for r in 5..=7 {
        for c in 3..=9 {
            worked.set(r, c, 1);
        }
    }
    let want = KeypointBox::new(0.125, 0.25, 0.6875, 0.5625);
    let got = mask_to_keypoints(&worked).map_err(err)?;
    ensure(
        got == Some(want) && reference_box(&worked) == Some(want),
        format!("worked example {got:?}"),
    )?;
    Ok("500 random masks contained and in [0,1]; rows 5-7 cols 3-9 -> (0.125, 0.25, 0.6875, 0.5625)".into())
}

fn overfit_sanity(dir: &Path) -> Check {
    let data = experiment::cached_dataset(&dir.join("overfit_8.cwf1"), 8, 21).map_err(err)?;
    let model = ModelConfig {
        base_filters: 8,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let mut net = MicroCrackNet::<f32>::build(&model, 4).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 2000,
        val_fraction: 0.0,
        eval_train: true,
        target_loss: Some(1e-4),
        max_steps: Some(2000),
        ..TrainConfig::default()
    };
    let log = train(&mut net, &data, &cfg, None, |_| {}).map_err(err)?;
    let final_mse = log.final_train_loss().ok_or("no epochs ran")?;
    ensure(
        final_mse < 1e-3,
        format!("training MSE {final_mse:.2e} after {} steps", log.steps),
    )?;
    let ev = evaluate(&mut net, &data, &[0.0], 1.0).map_err(err)?;
    let mean = ev.report.rows[0].mean.ok_or("empty evaluation")?.iou;
    ensure(mean > 0.9, format!("self-evaluation IoU {mean:.3}"))?;
    Ok(format!(
        "base_filters 8, dropout off: inference MSE {final_mse:.2e} after {} steps, self IoU {mean:.3}",
        log.steps
    ))
}

fn generalization(dir: &Path, preset: &Preset, target: f64, margin: Option<f64>) -> Check {
    let out = experiment::run(preset, dir, &DEFAULT_THRESHOLDS, |_| {}).map_err(err)?;
    let rows = &out.evaluation.report.rows;
    ensure(
        rows.len() == 5,
        "binned report must have the 5 threshold rows",
    )?;
    ensure(
        rows.iter()
            .map(|r| r.threshold)
            .eq(DEFAULT_THRESHOLDS.iter().copied()),
        "threshold rows",
    )?;
    let lift = out.test_iou - out.baseline_iou;
    let detail = format!(
        "{}/{} samples, base_filters {}, {} epochs in {:.0} s (+{:.0} s data): test IoU {:.3} over {} cracks, baseline {:.3}, lift {:.3}",
        preset.n_train,
        preset.n_test,
        preset.model.base_filters,
        out.log.epochs.len(),
        out.log.total_seconds,
        out.generation_seconds,
        out.test_iou,
        out.scored_count,
        out.baseline_iou,
        lift
    );
    ensure(out.test_iou >= target, detail.clone())?;
    if let Some(m) = margin {
        ensure(lift >= m, detail.clone())?;
    }
    Ok(detail)
}

fn desk_scale(dir: &Path) -> Check {
    let t0 = Instant::now();
    let quarter = generalization(dir, &Preset::quarter(), 0.25, None)?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 3600.0, format!("quarter preset took {secs:.0} s"))?;
    if std::env::var("MCPN_FULL_SCALE").is_ok_and(|v| v == "1") {
        let full = generalization(dir, &Preset::desk(), 0.30, Some(0.10))?;
        return Ok(format!("quarter: {quarter}; full: {full}"));
    }
    Ok(format!(
        "quarter preset: {quarter} (full 512/128 run gated by MCPN_FULL_SCALE=1)"
    ))
}

fn reproducibility(dir: &Path) -> Check {
    let cfg = LatticeConfig {
        seed: 42,
        ..LatticeConfig::default()
    };
    let sha = |name: &str| -> Result<Vec<u8>, String> {
        let p = dir.join(name);
        generate_dataset(
            3,
            &cfg,
            &CrackSampler::default(),
            &SourceSpec::default(),
            &p,
        )
        .map_err(err)?;
        Ok(Sha256::digest(std::fs::read(&p).map_err(err)?).to_vec())
    };
    ensure(
        sha("gen_a.cwf1")? == sha("gen_b.cwf1")?,
        "gen output differs between runs",
    )?;

    let data = Dataset::load(&dir.join("gen_a.cwf1")).map_err(err)?;
    let model = ModelConfig {
        base_filters: 4,
        dense_widths: vec![16],
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |sub: &str| -> Result<RunTrace, String> {
        let out = dir.join(sub);
        let mut net = MicroCrackNet::<f32>::build(&model, 8).map_err(err)?;
        let log = train(&mut net, &data, &tcfg, Some(&out), |_| {}).map_err(err)?;
        let raw = evaluate(&mut net, &data, &[0.0], 1.0).map_err(err)?.raw;
        let (mut back, _) = MicroCrackNet::<f32>::load(&out.join("final.mcpn")).map_err(err)?;
        let reloaded = evaluate(&mut back, &data, &[0.0], 1.0).map_err(err)?.raw;
        ensure(raw == reloaded, "reloaded checkpoint predicts differently")?;
        let ckpt = std::fs::read(out.join("final.mcpn")).map_err(err)?;
        Ok((log.epochs.iter().map(|e| e.train_loss).collect(), ckpt, raw))
    };
    ensure(run("rep_a")? == run("rep_b")?, "fixed-seed runs differ")?;
    Ok("gen SHA-256 equal; two seeded runs bitwise equal; checkpoint reload bitwise equal".into())
}

fn parameter_accounting() -> Check {
    let net = MicroCrackNet::<f32>::build(&ModelConfig::default(), 0).map_err(err)?;
    let (trainable, non_trainable) = net.count_params();
    ensure(
        (500_000..=2_500_000).contains(&trainable),
        format!("trainable {trainable}"),
    )?;
    let bn_sum: usize = net
        .graph()
        .layers()
        .map(|l| match l {
            Layer::BatchNorm(b) => b.channels(),
            _ => 0,
        })
        .sum();
    ensure(
        non_trainable == 2 * bn_sum,
        format!("non-trainable {non_trainable} vs 2 x {bn_sum}"),
    )?;
    let per_layer: usize = net
        .graph()
        .layers()
        .flat_map(|l| l.params())
        .map(|p| p.len())
        .sum();
    ensure(per_layer == trainable, "per-layer trainable sum")?;
    let conv_params = |base: usize| -> Result<usize, String> {
        let cfg = ModelConfig {
            base_filters: base,
            ..ModelConfig::default()
        };
        let n = MicroCrackNet::<f32>::build(&cfg, 0).map_err(err)?;
        let blocks = n
            .graph()
            .named_layers()
            .filter(|(name, _)| name.starts_with("block"));
        Ok(blocks
            .filter(|(_, l)| matches!(l, Layer::Conv2d(_)))
            .flat_map(|(_, l)| l.params())
            .map(|p| p.len())
            .sum())
    };
    let ratio = conv_params(32)? as f64 / conv_params(16)? as f64;
    ensure(
        (3.2..=4.8).contains(&ratio),
        format!("doubling base_filters scales block convs by {ratio:.2}"),
    )?;
    Ok(format!(
        "trainable {trainable}, non-trainable {non_trainable} = 2 x {bn_sum} BN channels, total {} (reference {REFERENCE_TOTAL_PARAMS}); doubling width x{ratio:.2}",
        trainable + non_trainable
    ))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("MCPN_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let dir = std::env::var("MCPN_ACCEPT_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("microcrack_acceptance"));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("cannot create {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    type Criterion<'a> = (usize, &'a str, f64, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "shape contract", 1.0, Box::new(shape_contract)),
        (2, "gradient suite", 120.0, Box::new(gradient_suite)),
        (3, "metric oracle", 10.0, Box::new(metric_oracle)),
        (4, "loss identities", 1.0, Box::new(loss_identities)),
        (5, "simulator physics", 120.0, Box::new(simulator_physics)),
        (6, "label rules", 5.0, Box::new(label_rules)),
        (
            7,
            "overfit sanity",
            1800.0,
            Box::new(|| overfit_sanity(&dir)),
        ),
        (
            8,
            "desk-scale generalization",
            f64::INFINITY,
            Box::new(|| desk_scale(&dir)),
        ),
        (
            9,
            "reproducibility and persistence",
            600.0,
            Box::new(|| reproducibility(&dir)),
        ),
        (
            10,
            "parameter accounting",
            1.0,
            Box::new(parameter_accounting),
        ),
    ];
    let mut failures = 0;
    for (id, name, budget, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = check();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match (&result, secs <= *budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the {budget:.0} s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("[{tag}] {id:>2} {name}: {detail} ({secs:.1} s)");
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
