//! Finite-difference verification of analytic gradients (64-bit only).
//!
//! The probe loss is `L = sum(out * r)` for a fixed random `r`, so the
//! upstream gradient is `r`. Each parameter and input element is perturbed
//! by `±STEP` on a fresh clone of the graph, which also clones dropout RNG
//! state and therefore reproduces the same masks.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

use super::{
    Add, AttentionAxis, BatchNorm, Concat, Conv2d, Dense, Dropout, Flatten, Graph, GraphBuilder,
    MaxPool2d, Mode, NodeId, Padding, Relu, Reshape, SelfAttention, Tensor,
};

pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Location of the worst entry, e.g. `conv/param0[17]` or `input[3]`.
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {} max_rel_error={:.3e} entries={} worst={} tol={:.0e}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.entries,
            self.worst,
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_loss(graph: &Graph<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let mut g = graph.clone();
    let y = g.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Checks every parameter and input gradient of `graph` at `x`.
pub fn check_graph(
    name: &str,
    graph: &Graph<f64>,
    x: &Tensor<f64>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, "gradcheck-upstream", 0);
    let mut out_shape = vec![x.batch()];
    out_shape.extend_from_slice(graph.output_shape());
    let r = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));

    let mut g = graph.clone();
    g.forward(x, Mode::Train)?;
    let dx = g.backward(&r)?;
    let analytic: Vec<Vec<Vec<f64>>> = g
        .layers()
        .map(|l| l.grads().iter().map(|t| t.data().to_vec()).collect())
        .collect();

    let mut worst = (0.0f64, String::from("-"));
    let mut entries = 0usize;
    let mut record = |err: f64, at: String| {
        entries += 1;
        if err > worst.0 || !err.is_finite() {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, at);
        }
    };

    let names: Vec<String> = graph.named_layers().map(|(n, _)| n.to_string()).collect();
    for (li, lg) in analytic.iter().enumerate() {
        for (pi, pg) in lg.iter().enumerate() {
            for (ei, &a) in pg.iter().enumerate() {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut h = graph.clone();
                    let layer = h.layers_mut().nth(li).unwrap();
                    layer.params_and_grads_mut()[pi].0.data_mut()[ei] += delta;
                    probe_loss(&h, x, &r)
                };
                let num = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
                record(
                    relative_error(a, num),
                    format!("{}/param{pi}[{ei}]", names[li]),
                );
            }
        }
    }
    for (ei, &a) in dx.data().iter().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[ei] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[ei] -= STEP;
        let num = (probe_loss(graph, &xp, &r)? - probe_loss(graph, &xm, &r)?) / (2.0 * STEP);
        record(relative_error(a, num), format!("input[{ei}]"));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst.0,
        entries,
        worst: worst.1,
        tolerance: DEFAULT_TOLERANCE,
    })
}

pub const SUITES: &[&str] = &[
    "dense",
    "relu",
    "conv2d",
    "conv2d_strided",
    "maxpool",
    "maxpool_time",
    "batchnorm",
    "attention",
    "attention_full",
    "dropout",
    "concat",
    "add",
    "reshape",
    "conv_block",
];

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, "gradcheck-input", 0);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values whose magnitude is at least `gap`, for probing kinks.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, "gradcheck-input", 1);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far beyond the probe step, in random order, so
/// max pooling never sees a near-tie.
fn tie_free(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = stream_rng(seed, "gradcheck-input", 2);
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn conv(
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: (usize, usize),
    pad: Padding,
    seed: u64,
) -> Conv2d<f64> {
    let mut c = Conv2d::new(kh, kw, cin, cout, stride, pad);
    c.init_uniform(6.0, &mut stream_rng(seed, "gradcheck-conv", 0));
    let mut rng = stream_rng(seed, "gradcheck-bias", 0);
    c.bias
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.gen_range(-0.1..0.1));
    c
}

fn batchnorm(channels: usize, seed: u64) -> BatchNorm<f64> {
    let mut bn = BatchNorm::new(channels);
    let mut rng = stream_rng(seed, "gradcheck-bn", 0);
    bn.gamma
        .data_mut()
        .iter_mut()
        .for_each(|g| *g = rng.gen_range(0.5..1.5));
    bn.beta
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.gen_range(-0.5..0.5));
    bn
}

/// Builds one inception-style block (1x1, 3x3, 5x5, pool+1x1 branches, each
/// conv followed by batchnorm and relu, concatenated on channels).
pub fn conv_block(
    b: &mut GraphBuilder<f64>,
    input: NodeId,
    c_in: usize,
    filters: usize,
    seed: u64,
) -> Result<NodeId> {
    let quarter = (filters / 4).max(1);
    let half = (filters / 2).max(1);
    let mut outs = Vec::new();
    for (i, (k, f)) in [(1, quarter), (3, half), (5, quarter)]
        .into_iter()
        .enumerate()
    {
        let c = b.chain(
            &format!("conv{k}x{k}"),
            conv(k, k, c_in, f, (1, 1), Padding::Same, seed + i as u64),
            input,
        )?;
        let n = b.chain(&format!("bn{k}x{k}"), batchnorm(f, seed + 10 + i as u64), c)?;
        outs.push(b.chain(&format!("relu{k}x{k}"), Relu::new(), n)?);
    }
    let p = b.chain(
        "pool3x3",
        MaxPool2d::new((3, 3), (1, 1), Padding::Same),
        input,
    )?;
    let c = b.chain(
        "pool_conv",
        conv(1, 1, c_in, quarter, (1, 1), Padding::Same, seed + 3),
        p,
    )?;
    let n = b.chain("pool_bn", batchnorm(quarter, seed + 13), c)?;
    outs.push(b.chain("pool_relu", Relu::new(), n)?);
    b.add("concat", Concat::new(), &outs)
}

/// Runs one named suite.
pub fn run_suite(name: &str) -> Result<GradCheckReport> {
    let seed = 0x6772_6164;
    let single = |layer: super::Layer<f64>, x: Tensor<f64>| -> Result<GradCheckReport> {
        let mut b = GraphBuilder::new(x.sample_shape());
        let out = b.chain(name, layer, NodeId::Input)?;
        check_graph(name, &b.build(out)?, &x, seed)
    };
    match name {
        "dense" => {
            let mut d = Dense::new(5, 3);
            d.init_uniform(6.0, &mut stream_rng(seed, "gc", 1));
            single(d.into(), uniform(&[4, 5], seed, -1.0, 1.0))
        }
        "relu" => single(Relu::new().into(), away_from_zero(&[3, 4, 5], seed, 1e-3)),
        "conv2d" => single(
            conv(3, 3, 2, 3, (1, 1), Padding::Same, seed).into(),
            uniform(&[2, 4, 4, 2], seed, -1.0, 1.0),
        ),
        "conv2d_strided" => single(
            conv(4, 4, 1, 2, (1, 4), Padding::Same, seed).into(),
            uniform(&[2, 3, 9, 1], seed, -1.0, 1.0),
        ),
        "maxpool" => single(
            MaxPool2d::new((2, 2), (2, 2), Padding::Valid).into(),
            tie_free(&[2, 5, 5, 2], seed),
        ),
        "maxpool_time" => single(MaxPool2d::temporal(4).into(), tie_free(&[2, 9, 3, 2], seed)),
        "batchnorm" => single(
            batchnorm(3, seed).into(),
            uniform(&[4, 2, 3, 3], seed, -1.0, 2.0),
        ),
        "attention" | "attention_full" => {
            let axis = if name == "attention" {
                AttentionAxis::Width
            } else {
                AttentionAxis::Full
            };
            let mut a = SelfAttention::new(2, axis);
            a.init_uniform(3.0, &mut stream_rng(seed, "gc", 2));
            single(a.into(), uniform(&[2, 3, 4, 2], seed, -1.0, 1.0))
        }
        "dropout" => single(
            Dropout::new(0.3, seed).into(),
            uniform(&[3, 8], seed, -1.0, 1.0),
        ),
        "concat" | "add" => {
            let x = uniform(&[2, 3, 3, 2], seed, -1.0, 1.0);
            let mut b = GraphBuilder::new(x.sample_shape());
            let c1 = b.chain(
                "left",
                conv(1, 1, 2, 2, (1, 1), Padding::Same, seed),
                NodeId::Input,
            )?;
            let c2 = b.chain(
                "right",
                conv(3, 3, 2, 2, (1, 1), Padding::Same, seed + 1),
                NodeId::Input,
            )?;
            let out = if name == "concat" {
                b.add("concat", Concat::new(), &[c1, c2, NodeId::Input])?
            } else {
                b.add("add", Add::new(), &[c1, c2, NodeId::Input])?
            };
            check_graph(name, &b.build(out)?, &x, seed)
        }
        "reshape" => {
            let x = uniform(&[2, 1, 3, 4], seed, -1.0, 1.0);
            let mut b = GraphBuilder::new(x.sample_shape());
            let r = b.chain("reshape", Reshape::new(&[3, 4, 1]), NodeId::Input)?;
            let c = b.chain("conv", conv(2, 2, 1, 2, (1, 1), Padding::Valid, seed), r)?;
            let f = b.chain("flatten", Flatten::new(), c)?;
            let mut d = Dense::new(12, 2);
            d.init_uniform(6.0, &mut stream_rng(seed, "gc", 3));
            let out = b.chain("dense", d, f)?;
            check_graph(name, &b.build(out)?, &x, seed)
        }
        "conv_block" => {
            let x = uniform(&[3, 5, 4, 2], seed, -1.0, 1.0);
            let mut b = GraphBuilder::new(x.sample_shape());
            let out = conv_block(&mut b, NodeId::Input, 2, 8, seed)?;
            check_graph(name, &b.build(out)?, &x, seed)
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck suite '{other}'; known: {}",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all() -> Result<Vec<GradCheckReport>> {
    SUITES.iter().map(|s| run_suite(s)).collect()
}
