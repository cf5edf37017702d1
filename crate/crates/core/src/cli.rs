//! `mcpn` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gradnet::gradcheck::{self, GradCheckReport, SUITES};
use crate::io::write_atomic;
use crate::kv;
use crate::metrics::{parse_thresholds, PairScore};
use crate::model::MicroCrackNet;
use crate::plot::{render_svg, sample_path, write_svg};
use crate::rng::derive_seed;
use crate::train::{batch_inputs, evaluate, sample_target, train, RunConfig};
use crate::wavesim::{CrackSampler, LatticeConfig, SourceSpec};

#[derive(Debug, Parser)]
#[command(
    name = "mcpn",
    version,
    about = "Simulate cracked plates, train the localizer, score and plot boxes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labelled dataset and write it as CWF1.
    Gen(GenArgs),
    /// Train a model on a CWF1 dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, binned by crack size.
    Eval(EvalArgs),
    /// Predict the crack box of one sample.
    Predict(PredictArgs),
    /// Write SVG overlays of predicted and true boxes.
    Plot(PlotArgs),
    /// Finite-difference gradient checks of the layer engine.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CWF1 path.
    #[arg(long)]
    pub out: PathBuf,
    /// Lattice nodes per side.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Recorded time steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    /// Ricker center frequency.
    #[arg(long, default_value_t = 0.1)]
    pub frequency: f64,
    /// Crack length range, in plate widths.
    #[arg(long, default_value_t = 0.15)]
    pub crack_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub crack_max: f64,
    #[arg(long, default_value_t = 0.02)]
    pub width_max: f64,
    /// Histogram bins for the printed crack-length summary.
    #[arg(long, default_value_t = 7)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (CWF1).
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated crack-size thresholds.
    #[arg(long, default_value = "0,0.001,0.002,0.003,0.004")]
    pub thresholds: String,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample index within the dataset.
    #[arg(long)]
    pub index: usize,
    /// Write an SVG overlay here.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["layer", "all"])))]
pub struct GradcheckArgs {
    /// Run a single suite.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    pub layer: Option<String>,
    /// Run every suite.
    #[arg(long)]
    pub all: bool,
}

fn gen(a: &GenArgs) -> Result<()> {
    let cfg = LatticeConfig {
        grid_nx: a.grid,
        grid_ny: a.grid,
        n_steps: a.steps,
        dt: a.dt,
        seed: a.seed,
        ..LatticeConfig::default()
    };
    let sampler = CrackSampler {
        length_min: a.crack_min,
        length_max: a.crack_max,
        width_max: a.width_max,
        ..CrackSampler::default()
    };
    let source = SourceSpec {
        center_frequency: a.frequency,
        ..SourceSpec::default()
    };
    let s = generate_dataset(a.n as usize, &cfg, &sampler, &source, &a.out)?;
    println!(
        "samples: {} -> {} ({} bytes)",
        s.n_samples,
        a.out.display(),
        s.file_len
    );
    println!("crack length histogram:");
    let bins = a.bins.max(1);
    let width = (a.crack_max - a.crack_min) / bins as f64;
    for (i, c) in s
        .histogram(a.crack_min, a.crack_max, bins)
        .iter()
        .enumerate()
    {
        let lo = a.crack_min + width * i as f64;
        println!("  [{lo:.4}, {:.4}) {c}", lo + width);
    }
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    // the model takes its input shape from the data unless the config pins it
    if !kv::parse(&text)?.iter().any(|(k, _)| k == "input_shape") {
        cfg.model.input_shape = data.input_shape();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let mut net = MicroCrackNet::<f32>::build(&cfg.model, derive_seed(cfg.train.seed, "init", 0))?;
    let (p, s) = net.count_params();
    println!(
        "model: {p} trainable, {s} non-trainable params; {} samples",
        data.len()
    );
    let total = cfg.train.epochs;
    let log = train(&mut net, &data, &cfg.train, Some(&a.out), |e| {
        let val = e.val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        let inference = e
            .train_eval_loss
            .map_or(String::new(), |v| format!("  train_eval {v:.6}"));
        println!(
            "epoch {}/{total}  train_loss {:.6}{inference}  val_loss {val}  {:.2} s",
            e.epoch, e.train_loss, e.seconds
        );
    })?;
    print!("{}", log.summary());
    println!("checkpoints: {}", a.out.join("best.mcpn").display());
    Ok(())
}

fn load(data: &Path, checkpoint: &Path) -> Result<(Dataset, MicroCrackNet<f32>)> {
    let data = Dataset::load(data)?;
    let (net, _) = MicroCrackNet::<f32>::load(checkpoint)?;
    if data.input_shape() != net.config().input_shape {
        return Err(Error::Shape(format!(
            "dataset samples are {:?} but the checkpoint expects {:?}",
            data.input_shape(),
            net.config().input_shape
        )));
    }
    Ok((data, net))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let thresholds = parse_thresholds(&a.thresholds)?;
    let (data, mut net) = load(&a.data, &a.checkpoint)?;
    let ev = evaluate(
        &mut net,
        &data,
        &thresholds,
        crate::losses::DEFAULT_HUBER_DELTA,
    )?;
    print!("{}", ev.report.to_table());
    let csv = ev.report.to_csv();
    match &a.csv {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("\n{csv}"),
    }
    Ok(())
}

/// Prediction, truth and scores of one sample.
fn predict_one(
    data: &Dataset,
    net: &mut MicroCrackNet<f32>,
    index: usize,
) -> Result<(crate::labels::KeypointBox, crate::labels::KeypointBox)> {
    if index >= data.len() {
        return Err(Error::Config(format!(
            "index {index} out of range for a dataset of {} samples",
            data.len()
        )));
    }
    let x = batch_inputs::<f32>(data, &[index]);
    let pred = net.predict_boxes(&x)?[0];
    Ok((pred, sample_target(data, index)?))
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (data, mut net) = load(&a.data, &a.checkpoint)?;
    let (pred, truth) = predict_one(&data, &mut net, a.index)?;
    let s = PairScore::of(&pred, &truth);
    println!(
        "pred   x_min {:.4} y_min {:.4} x_max {:.4} y_max {:.4}",
        pred.x_min, pred.y_min, pred.x_max, pred.y_max
    );
    println!(
        "truth  x_min {:.4} y_min {:.4} x_max {:.4} y_max {:.4}",
        truth.x_min, truth.y_min, truth.x_max, truth.y_max
    );
    println!(
        "IoU {:.4}  Purity {:.4}  Integrity {:.4}",
        s.iou, s.purity, s.integrity
    );
    if let Some(p) = &a.plot {
        let svg = render_svg(
            &data.samples[a.index].mask,
            Some(&truth),
            Some(&pred),
            &format!("sample {}", a.index),
        );
        write_svg(p, &svg)?;
        println!("figure: {}", p.display());
    }
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let (data, mut net) = load(&a.data, &a.checkpoint)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for &i in &a.indices {
        let (pred, truth) = predict_one(&data, &mut net, i)?;
        let path = sample_path(&a.out_dir, i);
        write_svg(
            &path,
            &render_svg(
                &data.samples[i].mask,
                Some(&truth),
                Some(&pred),
                &format!("sample {i}"),
            ),
        )?;
        println!("{}", path.display());
    }
    Ok(())
}

fn grad(a: &GradcheckArgs) -> Result<bool> {
    let reports: Vec<GradCheckReport> = match &a.layer {
        Some(name) => vec![gradcheck::run_suite(name)?],
        None => gradcheck::run_all()?,
    };
    for r in &reports {
        println!("{r}");
    }
    Ok(reports.iter().all(GradCheckReport::passed))
}

/// Runs one parsed invocation. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Plot(a) => plot(a).map(|_| true),
        Command::Gradcheck(a) => grad(a),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors() {
        assert!(Cli::try_parse_from(["mcpn", "gen", "--n", "0", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["mcpn", "train", "--out", "o"]).is_err());
        assert!(Cli::try_parse_from(["mcpn", "gradcheck", "--layer", "lstm"]).is_err());
        assert!(Cli::try_parse_from(["mcpn", "gradcheck"]).is_err());
        assert!(Cli::try_parse_from([
            "mcpn",
            "eval",
            "--data",
            "d",
            "--checkpoint",
            "c",
            "--bogus"
        ])
        .is_err());
        let ok = Cli::try_parse_from([
            "mcpn",
            "plot",
            "--data",
            "d",
            "--checkpoint",
            "c",
            "--indices",
            "1,4",
            "--out-dir",
            "o",
        ]);
        match ok.unwrap().command {
            Command::Plot(p) => assert_eq!(p.indices, vec![1, 4]),
            _ => unreachable!(),
        }
    }
}
