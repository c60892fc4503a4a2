#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darknight::Error;

use config::{LossArg, Overrides, RunConfig, Synthetic};

#[derive(Parser)]
#[command(name = "darknight", version, about = "Blinded offload of DNN inference and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blinded inference over a batch of inputs.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Enable the integrity row.
        #[arg(long)]
        integrity: bool,
        #[arg(long)]
        threshold: Option<f64>,
        /// Compare against an in-process plain forward pass.
        #[arg(long)]
        check_plain: bool,
    },
    /// Blinded SGD training; writes the model and a metrics log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Target tensor files, one per input file.
        #[arg(long = "target")]
        targets: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        integrity: bool,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also run the plain trainer and report the weight divergence.
        #[arg(long)]
        oracle: bool,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference with the integrity row, optionally with injected tampering.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        threshold: Option<f64>,
        /// `layer:equation:epsilon[:entry]`.
        #[arg(long)]
        tamper: Option<String>,
    },
    /// Mutual-information leakage bound.
    Bound {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        c1: Option<f64>,
        /// Squared ratio of the largest to smallest mixing coefficient.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        sigma_sq: Option<f64>,
        /// Reproduce the published noise table.
        #[arg(long)]
        table1: bool,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    noise_mean: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Model manifest.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    synthetic: Option<Synthetic>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Input tensor files, one sample each.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            k: self.k,
            noise_mean: self.noise_mean,
            noise_variance: self.noise_variance,
            noise_seed: self.noise_seed,
            model: self.model.clone(),
            model_seed: self.model_seed,
            ..Overrides::default()
        }
    }
}

impl DataArgs {
    fn apply(self, o: &mut Overrides) {
        o.synthetic = self.synthetic;
        o.samples = self.samples;
        o.data_seed = self.data_seed;
        o.inputs = self.inputs;
    }
}

fn resolve(common: &CommonArgs, o: Overrides) -> darknight::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(o);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> darknight::Result<commands::Outcome> {
    match cli.command {
        Command::Infer { common, data, integrity, threshold, check_plain } => {
            let mut o = common.overrides();
            data.apply(&mut o);
            o.integrity = integrity;
            o.threshold = threshold;
            commands::infer(&resolve(&common, o)?, check_plain)
        }
        Command::Train { common, data, targets, epochs, eta, batch_size, loss, integrity, threshold, oracle, out } => {
            let mut o = common.overrides();
            data.apply(&mut o);
            o.targets = targets;
            o.epochs = epochs;
            o.eta = eta;
            o.batch_size = batch_size;
            o.loss = loss.map(Into::into);
            o.integrity = integrity;
            o.threshold = threshold;
            o.oracle = oracle;
            o.output = out;
            commands::train(&resolve(&common, o)?)
        }
        Command::Verify { common, data, threshold, tamper } => {
            let mut o = common.overrides();
            data.apply(&mut o);
            o.threshold = threshold;
            o.tamper = tamper;
            commands::verify(&resolve(&common, o)?)
        }
        Command::Bound { common, c1, ratio, sigma_sq, table1, tolerance } => {
            let mut o = common.overrides();
            o.c1 = c1;
            o.ratio = ratio;
            o.sigma_sq = sigma_sq;
            o.tolerance = tolerance;
            commands::bound(&resolve(&common, o)?, table1)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            let text = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
            // A closed stdout is not a failure of the run.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            if outcome.violation {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e @ Error::Integrity { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
