//! The `avae` command-line front end.
//!
//! Exit codes: `0` success, `1` runtime failure (optimizer did not converge,
//! training diverged, I/O while writing outputs), `2` usage or input errors
//! (bad flags, unreadable or invalid config, malformed CSV, corrupt
//! checkpoint).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{self, BandwidthConfig, DEFAULT_SEEDS};
use crate::datagen::DatasetSpec;
use crate::evalx::{self, DiagnosticsOptions, DEFAULT_COLLAPSE_TAU};
use crate::kde::EntropyMode;
use crate::trainer::{self, Checkpoint, EpochLog, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "avae", version, about = "KDE aggregate-posterior autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the prior-aware KDE bandwidth for latent size / sample count.
    Bandwidth(BandwidthArgs),
    /// Train an autoencoder from a JSON run config.
    Train(TrainArgs),
    /// Diagnose a CSV of latent codes.
    EvalLatents(EvalArgs),
    /// Sample from a trained checkpoint.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct BandwidthArgs {
    /// Latent dimension (single cell).
    #[arg(long)]
    pub dim: Option<usize>,
    /// KDE sample count(s); comma-separated with --table.
    #[arg(long, value_delimiter = ',')]
    pub samples: Vec<usize>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Evaluate the full --dims x --samples grid.
    #[arg(long)]
    pub table: bool,
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Loo,
    Split,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub latents: PathBuf,
    /// Corrected bandwidth of the trained model (sets the variance target).
    #[arg(long = "h-corr")]
    pub h_corr: f64,
    /// JSON report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Collapse threshold on per-axis variance.
    #[arg(long, default_value_t = DEFAULT_COLLAPSE_TAU)]
    pub tau: f64,
    /// Skip the bandwidth search and use this entropy bandwidth.
    #[arg(long = "entropy-bandwidth")]
    pub entropy_bandwidth: Option<f64>,
    #[arg(long, value_enum, default_value = "loo")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run config: a training config plus where to put the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse strictly and resolve relative paths against `base`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = resolve(base, &cfg.output_dir);
        if let DatasetSpec::Idx { path, .. } = &mut cfg.train.dataset {
            *path = resolve(base, path);
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse `std::env::args` and run.
pub fn run() -> i32 {
    run_with(std::env::args_os())
}

pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Bandwidth(a) => cmd_bandwidth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::EvalLatents(a) => cmd_eval_latents(&a),
        Command::Gen(a) => cmd_gen(&a),
    }
}

pub fn cmd_bandwidth(a: &BandwidthArgs) -> Result<()> {
    let (ls, ms) = if a.table {
        if a.dims.is_empty() || a.samples.is_empty() {
            return Err(CliError::Usage("--table needs --dims and --samples".into()));
        }
        (a.dims.clone(), a.samples.clone())
    } else {
        let l = a.dim.ok_or_else(|| CliError::Usage("--dim is required".into()))?;
        match a.samples.as_slice() {
            [m] => (vec![l], vec![*m]),
            _ => return Err(CliError::Usage("--samples takes exactly one value without --table".into())),
        }
    };
    if ls.contains(&0) {
        return Err(CliError::Usage("--dim must be at least 1".into()));
    }
    if ms.iter().any(|&m| m < 2) {
        return Err(CliError::Usage("--samples must be at least 2".into()));
    }
    let seeds = a.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds must not be empty".into()));
    }

    let rows = bandwidth::bandwidth_table(&ls, &ms, &BandwidthConfig::default(), &seeds)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{}", bandwidth::format_table(&rows));
    if let Some(out) = &a.out {
        let f = File::create(out).map_err(|e| io_err(out, e))?;
        bandwidth::write_csv(&rows, &seeds, BufWriter::new(f)).map_err(|e| io_err(out, e))?;
    }
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().err().map(|e| e.to_string()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(failed.join("; ")))
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATENTS_FILE: &str = "latents.csv";

fn write_metrics(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for log in logs {
        let line = serde_json::to_string(log).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Matrix as CSV with header `{prefix}0, {prefix}1, ...`.
pub fn write_matrix_csv<W: Write>(x: &Array2<f64>, prefix: &str, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..x.ncols()).map(|i| format!("{prefix}{i}")))?;
    for row in x.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV whose header is `{prefix}0..{prefix}{l-1}`.
pub fn read_matrix_csv(path: &Path, prefix: &str) -> Result<Array2<f64>> {
    let bad = |msg: String| CliError::Input(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    for (i, name) in header.iter().enumerate() {
        if name.trim() != format!("{prefix}{i}") {
            return Err(bad(format!("line 1: expected column {prefix}{i}, found {name:?}")));
        }
    }
    let l = header.len();
    if l == 0 {
        return Err(bad("line 1: empty header".into()));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(format!("line {line}: {e}")))?;
        if rec.len() != l {
            return Err(bad(format!("line {line}: expected {l} fields, found {}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {line}: not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("line {line}: non-finite value")));
            }
            values.push(v);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, l), values).expect("row lengths checked"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);

    let outcome = match trainer::train(&cfg.train) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, batch, loss, logs }) => {
            write_metrics(&metrics_path, &logs)?;
            return Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}, batch {batch} (loss {loss})"
            )));
        }
        Err(e @ (TrainError::Config(_) | TrainError::Data(_))) => return Err(CliError::Input(e.to_string())),
        Err(e) => return Err(CliError::Runtime(e.to_string())),
    };
    for log in &outcome.logs {
        eprintln!(
            "epoch {:>3}  beta {:.4}  train {:.5}  val {:.5}  kl {:.4}  ({:.1}s)",
            log.epoch, log.beta, log.train_recon, log.val_recon, log.kl_estimate, log.wall_time_s
        );
    }

    write_metrics(&metrics_path, &outcome.logs)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::from_outcome(&cfg.train, &outcome);
    let text = serde_json::to_string_pretty(&ckpt).map_err(|e| io_err(&ckpt_path, e))?;
    fs::write(&ckpt_path, text + "\n").map_err(|e| io_err(&ckpt_path, e))?;
    let lat_path = dir.join(LATENTS_FILE);
    let f = File::create(&lat_path).map_err(|e| io_err(&lat_path, e))?;
    write_matrix_csv(&outcome.val_latents, "z", BufWriter::new(f)).map_err(|e| io_err(&lat_path, e))?;
    println!(
        "trained {} epochs, h_corr {:.4}, final val recon {:.5}; outputs in {}",
        cfg.train.epochs,
        outcome.h_corr,
        outcome.logs.last().map_or(f64::NAN, |l| l.val_recon),
        dir.display()
    );
    Ok(())
}

pub fn cmd_eval_latents(a: &EvalArgs) -> Result<()> {
    let z = read_matrix_csv(&a.latents, "z")?;
    let opts = DiagnosticsOptions {
        collapse_tau: a.tau,
        entropy_bandwidth: a.entropy_bandwidth,
        entropy_mode: match a.mode {
            ModeArg::Loo => EntropyMode::LeaveOneOut,
            ModeArg::Split => EntropyMode::Split,
        },
        ..Default::default()
    };
    let report = evalx::latent_diagnostics(&z, a.h_corr, &opts).map_err(|e| match e {
        evalx::EvalError::Bandwidth(_) => CliError::Runtime(e.to_string()),
        _ => CliError::Input(e.to_string()),
    })?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &a.out {
        Some(out) => {
            fs::write(out, json + "\n").map_err(|e| io_err(out, e))?;
            println!("entropy: {:.4}", report.whitened_entropy);
            println!("collapsed axes: {}", report.collapsed_axes.len());
        }
        None => {
            println!("{json}");
            eprintln!("entropy: {:.4}", report.whitened_entropy);
            eprintln!("collapsed axes: {}", report.collapsed_axes.len());
        }
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let bad = |e: String| CliError::Input(format!("{}: {e}", a.checkpoint.display()));
    let text = fs::read_to_string(&a.checkpoint).map_err(|e| bad(e.to_string()))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let model = ckpt.model().map_err(|e| bad(e.to_string()))?;
    if !(ckpt.h_corr > 0.0 && ckpt.h_corr < 1.0) {
        return Err(bad(format!("stored h_corr {} is out of range", ckpt.h_corr)));
    }
    let x = evalx::generate(&model.decoder, ckpt.h_corr, a.n, a.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &a.out {
        Some(out) => {
            let f = File::create(out).map_err(|e| io_err(out, e))?;
            write_matrix_csv(&x, "x", BufWriter::new(f)).map_err(|e| io_err(out, e))?;
        }
        None => write_matrix_csv(&x, "x", io::stdout().lock()).map_err(|e| CliError::Runtime(e.to_string()))?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_with(["avae", "bandwidth", "--dim", "0", "--samples", "500"]), 2);
        assert_eq!(run_with(["avae", "bandwidth", "--samples", "500"]), 2);
        assert_eq!(run_with(["avae", "bandwidth", "--dim", "3", "--samples", "1,2"]), 2);
        assert_eq!(run_with(["avae", "frobnicate"]), 2);
        assert_eq!(run_with(["avae", "train", "--config", "/nonexistent/run.json"]), 2);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        let x = ndarray::array![[0.1, -2.5], [1e-300, 3.0]];
        write_matrix_csv(&x, "z", File::create(&p).unwrap()).unwrap();
        assert_eq!(read_matrix_csv(&p, "z").unwrap(), x);
        assert!(read_matrix_csv(&p, "x").is_err());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        fs::write(&p, "z0,z1\n1,2\n3\n").unwrap();
        let err = read_matrix_csv(&p, "z").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        fs::write(&p, "z0,z1\n1,2\n3,abc\n").unwrap();
        let err = read_matrix_csv(&p, "z").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn run_config_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(
            &p,
            r#"{"output_dir": "out", "train": {"latent_dim": 2, "kde_samples": 50, "epochs": 1, "seed": 0,
                "dataset": {"kind": "mixture", "n": 200, "k": 2, "d": 2, "spread": 0.2}}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        fs::write(&p, r#"{"output_dir": "out", "extra": 1, "train": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(CliError::Input(_))));
    }
}
