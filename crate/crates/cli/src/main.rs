//! `soy`: fit, synthesize, score and self-check body shape estimates.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 numerical failure.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "soy", version, about = "Body shape fitting from dense correspondences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine body parameters against a correspondence file.
    Fit(FitArgs),
    /// Write a synthetic scene with known ground truth.
    Synth(SynthArgs),
    /// Score a prediction.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Check every analytic loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the bundled procedural model as an SMF file.
    Fixture(FixtureArgs),
}

#[derive(Args, Clone)]
pub struct ModelArg {
    /// SMF model file; without one the bundled procedural model is used.
    #[arg(long, env = "SOY_MODEL")]
    pub model: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct CameraArgs {
    /// Focal length in pixels.
    #[arg(long, default_value_t = soy_core::camera::DEFAULT_FOCAL)]
    pub focal: f64,
    /// Image size as WxH; defaults to the size recorded in the input file.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(u32, u32)>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DpNormalizeArg {
    Sum,
    Mean,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub corr: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=3))]
    pub stage: u32,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight overrides, e.g. `dp=0,prior_beta=10`; may be repeated.
    #[arg(long, value_delimiter = ',', value_parser = parse_weight)]
    pub weights: Vec<(String, f64)>,
    /// 2D keypoints; used when the `2d` weight is positive.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Run every iteration instead of stopping once the loss plateaus.
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long, value_enum, default_value = "sum")]
    pub dp_normalize: DpNormalizeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mesh_out: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BetaModeArg {
    Prior,
    Zero,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n_records: usize,
    /// Standard deviation of pixel noise added to each record.
    #[arg(long, default_value_t = 0.0)]
    pub noise_px: f64,
    #[arg(long, value_enum, default_value = "prior")]
    pub beta_mode: BetaModeArg,
    /// Standard deviation of each pose coordinate, in radians.
    #[arg(long, default_value_t = 0.2)]
    pub theta_sigma: f64,
    #[arg(long, default_value_t = soy_core::camera::DEFAULT_FOCAL)]
    pub focal: f64,
    #[arg(long, value_parser = parse_size, default_value = "224x224")]
    pub size: (u32, u32),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// T-pose per-vertex error after scale correction, in millimeters.
    PveTSc(PveArgs),
    /// Intersection-over-union of the rendered prediction against a mask.
    Miou(MiouArgs),
}

#[derive(Args)]
pub struct PveArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Args)]
pub struct MiouArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = soy_core::gradcheck::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb one loss's analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = soy_core::fixture::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let dim = |d: &str| d.trim().parse::<u32>().ok().filter(|v| *v > 0);
    match (dim(w), dim(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected two positive integers in `{s}`")),
    }
}

fn parse_weight(pair: &str) -> Result<(String, f64), String> {
    let (k, v) = pair.split_once('=').ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("weight `{}` is not a number", k.trim()))?;
    Ok((k.trim().to_owned(), v))
}

/// The error chain, skipping causes whose text an outer message already
/// includes.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Synth(a) => commands::synth(a),
        Command::Metrics(MetricsCommand::PveTSc(a)) => commands::pve_t_sc(a),
        Command::Metrics(MetricsCommand::Miou(a)) => commands::miou(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("224x200"), Ok((224, 200)));
        assert!(parse_size("0x5").is_err());
        assert!(parse_size("224").is_err());
    }

    #[test]
    fn weights_parse() {
        assert_eq!(parse_weight(" prior_beta=2.5"), Ok(("prior_beta".to_owned(), 2.5)));
        assert!(parse_weight("dp").is_err());
        assert!(parse_weight("dp=x").is_err());
        let cli = Cli::try_parse_from([
            "soy", "fit", "--corr", "c", "--init", "i", "--stage", "2", "--out", "o", "--weights", "dp=0,tpose=1",
            "--weights", "2d=3",
        ])
        .unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        assert_eq!(a.weights.len(), 3);
        assert_eq!(a.weights[2], ("2d".to_owned(), 3.0));
    }

    #[test]
    fn error_chains_are_not_repeated() {
        let inner = std::io::Error::new(std::io::ErrorKind::NotFound, "missing");
        let e = anyhow::Error::new(inner).context("reading a.json: missing");
        assert_eq!(describe(&e), "reading a.json: missing");
        let e = anyhow::anyhow!("inner").context("outer");
        assert_eq!(describe(&e), "outer: inner");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
