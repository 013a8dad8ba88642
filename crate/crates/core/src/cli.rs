use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use crate::clipping::{log_grid, median, sweep_empirical, NormEstimator, SweepConfig};
use crate::compress::{Compressor, CompressorKind, PayloadWidth};
use crate::config::{keys_help, ExperimentConfig};
use crate::denoise::{denoise_step, DenoiseConfig, DenoiseState};
use crate::dp::{rdp_epsilon, NoisePlacement, OrderGrid, PrivacyParams};
use crate::dump::write_dump;
use crate::error::{Error, Result};
use crate::error_analysis::stage_breakdown;
use crate::harness::{oracle_stream, run_training, ClipSetting, OracleStream};
use crate::report::{emit_report, render_report, CellResult, ReportFormat, SeedRun};
use crate::rng::RngStream;

pub const SEED_ENV: &str = "DPGRAD_LAB_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "dpgrad-lab",
    version,
    about = "Private gradient pipelines, compression and error analysis"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Root seed; falls back to $DPGRAD_LAB_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every grid cell and seed of an experiment config.
    Run(RunArgs),
    /// Empirical MSE over a grid of clip radii, with the model curve and C*.
    SweepClipping(SweepArgs),
    /// MSE, bias and variance after clip, noise and compression.
    ErrorBreakdown(BreakdownArgs),
    /// Denoise sender/receiver on the oracle stream, one CSV row per step.
    DenoiseRun(DenoiseArgs),
    /// RDP epsilon of the Gaussian mechanism after N steps.
    Account(AccountArgs),
    /// Print oracle batches in the gradient dump format.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set oracle.m=512 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for runs.csv and summary.json; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stdout format when --out is absent.
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    sigma: f64,
    /// Log-spaced radii `lo:hi:points`; default spans 0.01x to 10x the
    /// median row norm with 32 points.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value = "median")]
    norm_estimator: NormEstimator,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Optional top-k rate applied after noising.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Debug, Args)]
struct BreakdownArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    sigma: Option<f64>,
    /// Clip radius; default is the median row norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Top-k rate for the compression stage; default uses compress.* keys.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct AccountArgs {
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    delta: f64,
    /// Extra geometrically spaced RDP orders.
    #[arg(long, default_value_t = 0)]
    dense: usize,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Also write the prescribed gradient as a one-row dump.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn command() -> clap::Command {
    let keys = keys_help();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    for name in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(keys));
    }
    cmd.after_help(keys)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on
/// success, 1 on usage errors, 2 on runtime failures.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return 1;
        }
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => match v.trim().parse() {
                Ok(s) => s,
                Err(_) => {
                    let _ = writeln!(err, "error: {SEED_ENV}={v:?} is not an unsigned integer");
                    return 1;
                }
            },
            Err(_) => 0,
        },
    };
    match execute(cli.command, seed, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn execute(command: Command, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let text = match command {
        Command::Run(args) => run(&args, seed)?,
        Command::SweepClipping(args) => sweep(&args, seed, err)?,
        Command::ErrorBreakdown(args) => breakdown(&args, seed)?,
        Command::DenoiseRun(args) => denoise_run(&args, seed)?,
        Command::Account(args) => account(&args, err)?,
        Command::Oracle(args) => oracle(&args, seed)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn run(args: &RunArgs, seed: u64) -> Result<String> {
    let path = args
        .config
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("run needs --config".into()))?;
    let cfg = args.config.load()?;
    let cells = cfg.grid_cells()?;
    let seeds: u64 = cfg.get("train.seeds")?;
    if seeds == 0 {
        return Err(Error::Config("train.seeds must be >= 1".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, seed.wrapping_add(s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", args.jobs)))?;
    let runs: Vec<Result<SeedRun>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, run_seed)| {
                let cell = &cells[c].config;
                let task = cell.task_spec()?;
                let model = cell.model_spec(&task)?;
                let run = run_training(
                    &task,
                    &model,
                    &cell.pipeline()?,
                    &cell.train_config(run_seed)?,
                )?;
                Ok(SeedRun {
                    seed: run_seed,
                    run,
                })
            })
            .collect()
    });
    let mut results: Vec<CellResult> = cells
        .iter()
        .map(|c| CellResult {
            label: c.label.clone(),
            config_hash: c.config.config_hash(),
            runs: Vec::new(),
        })
        .collect();
    for (&(c, _), run) in jobs.iter().zip(runs) {
        results[c].runs.push(run?);
    }

    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            emit_report(&results, ReportFormat::Csv, &dir.join("runs.csv"))?;
            emit_report(&results, ReportFormat::Json, &dir.join("summary.json"))?;
            Ok(format!(
                "config={} cells={} seeds={seeds} out={}\n",
                path.display(),
                results.len(),
                dir.display()
            ))
        }
        None => render_report(&results, args.format.parse()?),
    }
}

/// One batch from the oracle fixture configured by `oracle.*`.
fn oracle_batch(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(crate::harness::OracleSpec, crate::SampleBatchGradients)> {
    let spec = cfg.oracle_spec(&mut RngStream::labeled(seed, "oracle-fixture"))?;
    let batch = oracle_stream(&spec, 1, RngStream::labeled(seed, "oracle-batches"))
        .pop()
        .expect("one batch requested");
    Ok((spec, batch))
}

fn parse_grid(text: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("--grid expects lo:hi:points, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

fn sweep(args: &SweepArgs, seed: u64, err: &mut dyn Write) -> Result<String> {
    let cfg = args.config.load()?;
    let (_, batch) = oracle_batch(&cfg, seed)?;
    let med = median(&batch.row_norms());
    let (lo, hi, points) = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => (0.01 * med, 10.0 * med, 32),
    };
    let grid = log_grid(lo, hi, points)?;
    let g_norm = args.norm_estimator.estimate(&batch);
    let compressor = args.rate.map(|rate| CompressorKind::TopK {
        rate,
        width: PayloadWidth::default(),
    });
    let sweep_cfg = SweepConfig {
        sigma: args.sigma,
        delta: 1e-5,
        placement: cfg.get("privacy.placement")?,
        compressor,
        trials: args.trials,
        g_norm,
    };
    let result = sweep_empirical(
        &batch,
        &grid,
        &sweep_cfg,
        &RngStream::labeled(seed, "sweep-clipping"),
    )?;
    let _ = writeln!(
        err,
        "note: model curve uses g_norm from the {} estimator; argmin of empirical MSE is {}",
        args.norm_estimator,
        result.empirical_argmin()
    );
    let mut text = result.to_csv();
    text.push_str(&format!(
        "c_star={} norm_estimator={} g_norm={}\n",
        result.optimum.c_star, args.norm_estimator, g_norm
    ));
    Ok(text)
}

fn breakdown(args: &BreakdownArgs, seed: u64) -> Result<String> {
    let cfg = args.config.load()?;
    let (_, batch) = oracle_batch(&cfg, seed)?;
    let sigma = match args.sigma {
        Some(s) => s,
        None => cfg.get("privacy.sigma")?,
    };
    let clip = args.clip.unwrap_or_else(|| median(&batch.row_norms()));
    let compressor = match args.rate {
        Some(1.0) => CompressorKind::None,
        Some(rate) => CompressorKind::TopK {
            rate,
            width: PayloadWidth::default(),
        },
        None => cfg.compressor()?,
    };
    let params = PrivacyParams::new(clip, sigma, 1e-5)?;
    let placement: NoisePlacement = cfg.get("privacy.placement")?;
    let result = stage_breakdown(
        &params,
        placement,
        compressor,
        &batch,
        args.trials,
        &RngStream::labeled(seed, "error-breakdown"),
    )?;
    Ok(result.to_csv())
}

fn denoise_run(args: &DenoiseArgs, seed: u64) -> Result<String> {
    let cfg = args.config.load()?;
    let spec = cfg.oracle_spec(&mut RngStream::labeled(seed, "oracle-fixture"))?;
    let steps: usize = cfg.get("oracle.steps")?;
    let mut stream = OracleStream::new(spec.clone(), RngStream::labeled(seed, "oracle-batches"));
    let privacy = cfg
        .privacy()?
        .ok_or_else(|| Error::Config("denoise-run needs privacy.enabled = true".into()))?;
    let delta = privacy.delta.unwrap_or(1e-5);
    let beta: f64 = cfg.get("denoise.beta")?;
    let gamma: f64 = cfg.get("denoise.gamma")?;
    let tie = cfg.get("denoise.tie_break")?;
    let mut compressor = Compressor::new(cfg.compressor()?, spec.layout().clone())?;
    let mut state = DenoiseState::new(spec.layout().clone());
    let root = RngStream::labeled(seed, "denoise-run");

    let mut text = String::from("step,flag,residual_norm_v,residual_norm_a,mse_receiver\n");
    let mut denoise: Option<DenoiseConfig> = None;
    for step in 0..steps {
        let batch = stream.next_batch();
        let dc = match denoise {
            Some(d) => d,
            None => {
                let clip = match privacy.clip {
                    ClipSetting::Fixed(c) => c,
                    ClipSetting::MedianAtStart => median(&batch.row_norms()),
                };
                *denoise.insert(DenoiseConfig::new(
                    beta,
                    gamma,
                    PrivacyParams::new(clip, privacy.sigma, delta)?,
                    tie,
                )?)
            }
        };
        let out = denoise_step(
            &batch,
            &dc,
            &mut state,
            &mut compressor,
            &mut root.fork(step as u64),
        )?;
        let mse = state.v_receiver.distance_sq(&spec.g)?;
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            step + 1,
            out.message.flag.label(),
            out.residual_norm_v,
            out.residual_norm_a,
            mse
        ));
    }
    Ok(text)
}

fn account(args: &AccountArgs, err: &mut dyn Write) -> Result<String> {
    let grid = if args.dense == 0 {
        OrderGrid::default()
    } else {
        OrderGrid::dense(args.dense)
    };
    let spend = rdp_epsilon(args.sigma, args.steps, args.delta, &grid)?;
    let _ = writeln!(
        err,
        "note: no subsampling amplification; epsilon upper-bounds what a subsampled accountant reports"
    );
    let alpha = spend
        .alpha
        .map(|a| a.to_string())
        .unwrap_or_else(|| "none".into());
    Ok(format!("epsilon={:.2} alpha={alpha}\n", spend.epsilon))
}

fn oracle(args: &OracleArgs, seed: u64) -> Result<String> {
    let cfg = args.config.load()?;
    let spec = cfg.oracle_spec(&mut RngStream::labeled(seed, "oracle-fixture"))?;
    if let Some(path) = &args.truth {
        let truth = crate::SampleBatchGradients::new(vec![spec.g.clone()])?;
        std::fs::write(path, write_dump(&truth)).map_err(|e| Error::io(path, e))?;
    }
    let batches = oracle_stream(
        &spec,
        args.steps,
        RngStream::labeled(seed, "oracle-batches"),
    );
    Ok(batches.iter().map(write_dump).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = dispatch(
            std::iter::once("dpgrad-lab").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn account_line() {
        let (code, out, err) = call(&[
            "account", "--sigma", "1.0", "--steps", "1", "--delta", "1e-5",
        ]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(out, "epsilon=5.30 alpha=6\n");
        assert!(err.contains("subsampling"));
    }

    #[test]
    fn usage_errors() {
        let (code, _, err) = call(&[]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn missing_config_names_path() {
        let (code, _, err) = call(&["run", "--config", "missing.conf"]);
        assert_eq!(code, 2);
        assert!(err.contains("missing.conf"), "{err}");
    }

    #[test]
    fn help_lists_config_keys() {
        for sub in [
            "run",
            "sweep-clipping",
            "error-breakdown",
            "denoise-run",
            "account",
            "oracle",
        ] {
            let (code, out, _) = call(&[sub, "--help"]);
            assert_eq!(code, 0);
            assert!(
                out.contains("privacy.sigma") && out.contains("denoise.beta"),
                "{sub}"
            );
        }
    }

    #[test]
    fn grid_spec_parsing() {
        assert_eq!(parse_grid("0.1:10:32").unwrap(), (0.1, 10.0, 32));
        assert!(parse_grid("0.1:10").is_err());
        assert!(parse_grid("a:b:c").is_err());
    }
}
