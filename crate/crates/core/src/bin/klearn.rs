//! Command-line front end: run experiments, execute verification suites,
//! fit Koopman operators, and run the observer robustness demo.
//!
//! Exit codes: 0 success, 1 verification/invariant failure, 2 usage or
//! config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use kalman_learn::bench::{self, LearnerSpec, RunRecord};
use kalman_learn::config::RunConfig;
use kalman_learn::error::Error;
use kalman_learn::koopman::{self, Dictionary};
use kalman_learn::observer::{self, ToyDecoder};
use kalman_learn::verify::{self, Suite};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "KALMAN_LEARN_OUT";

#[derive(Parser)]
#[command(name = "klearn", version, about = "Recursive Bayesian filtering as a learning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learner from a config file and export metrics.
    Train(TrainArgs),
    /// Run verification suites (acceptance criteria).
    Verify(VerifyArgs),
    /// Fit a lifted linear operator to a trajectory file via EDMD.
    KoopmanFit(KoopmanFitArgs),
    /// Token-dropout robustness table for the innovation-corrected observer.
    ObserverDemo(ObserverDemoArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit non-zero on any invariant violation (e.g. divergence).
    #[arg(long)]
    strict: bool,
    /// Output root (overrides config and KALMAN_LEARN_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Enable dense-oracle audits.
    #[arg(long)]
    audit: bool,
    /// Concurrent seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite: filter|geometry|stability|koopman|observer|covariance|all.
    #[arg(default_value = "all")]
    suite: String,
}

#[derive(Args)]
struct KoopmanFitArgs {
    /// Delimited trajectory file: one state per row, comma-separated.
    #[arg(long)]
    trajectory: PathBuf,
    /// Dictionary: identity | monomials:DEGREE | quadratic-benchmark.
    #[arg(long, default_value = "identity")]
    dictionary: String,
    /// Ridge weight for the EDMD normal equations (defaults internally).
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct ObserverDemoArgs {
    #[arg(long, default_value_t = 6)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Token dropout probability applied to the observer's inputs.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::KoopmanFit(args) => cmd_koopman_fit(args),
        Command::ObserverDemo(args) => cmd_observer_demo(args),
    };
    match code {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Usage/config problems exit 2; runtime/verification failures exit 1.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::InvalidArgument { .. } => 2,
        _ => 1,
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    if !args.config.exists() {
        return Err(Error::Config(format!(
            "config file not found: {}",
            args.config.display()
        )));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seeds(vec![seed]);
    }
    if args.audit {
        cfg.audit = true;
    }
    let steps = cfg.effective_steps();
    let hash = cfg.hash_hex()?;

    let out_root = args
        .out
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run_dir = claim_run_dir(&out_root, &hash)?;

    let jobs = args.jobs.max(1);
    let mut records: Vec<RunRecord> = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(jobs) {
        let handles: Vec<_> = chunk
            .iter()
            .map(|&seed| {
                let task = cfg.task.clone();
                let learner = cfg.learner.clone();
                std::thread::spawn(move || match &learner {
                    LearnerSpec::Filtering(spec) => {
                        bench::train_filtering(&task, spec, steps, seed)
                    }
                    LearnerSpec::Baseline(opt) => bench::train_baseline(&task, opt, steps, seed),
                })
            })
            .collect();
        for handle in handles {
            let record = handle
                .join()
                .map_err(|_| Error::invalid("train", "worker thread panicked"))??;
            records.push(record);
        }
    }

    let paths = bench::export_metrics(&records, &run_dir)?;
    // COMPLETE marker: the run directory is final and never reused.
    std::fs::write(run_dir.join("COMPLETE"), format!("{hash}\n")).map_err(|e| Error::Io {
        path: run_dir.display().to_string(),
        source: e,
    })?;

    let mut violations = 0;
    for record in &records {
        let diverged = record.final_metrics.get("diverged").copied().unwrap_or(0.0) > 0.0;
        if diverged {
            violations += 1;
        }
        println!(
            "run {}: {} steps, mean loss {:.6}, final loss {:.6}{}",
            record.run_id,
            record.entries.len(),
            record.final_metrics.get("mean_loss").copied().unwrap_or(f64::NAN),
            record.final_metrics.get("final_loss").copied().unwrap_or(f64::NAN),
            if diverged { " [DIVERGED]" } else { "" }
        );
    }
    println!("config hash {hash}");
    println!("wrote {} files to {}", paths.len(), run_dir.display());
    if args.strict && violations > 0 {
        eprintln!("strict mode: {violations} run(s) violated invariants");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// Atomically claim a fresh run directory named by config hash + timestamp.
/// A directory containing a COMPLETE marker is never reused.
fn claim_run_dir(root: &Path, hash: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(root).map_err(|e| Error::Io {
        path: root.display().to_string(),
        source: e,
    })?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for attempt in 0..1000 {
        let name = if attempt == 0 {
            format!("{hash}-{stamp}")
        } else {
            format!("{hash}-{stamp}-{attempt}")
        };
        let dir = root.join(name);
        // create_dir (not create_dir_all) is the atomic claim: it fails if
        // the path already exists, so concurrent runs cannot share a dir.
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(Error::Io {
                    path: dir.display().to_string(),
                    source: e,
                })
            }
        }
    }
    Err(Error::Config("could not claim a fresh run directory".into()))
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Error> {
    let suite: Suite = args.suite.parse()?;
    let results = verify::run_suite(suite);
    for r in &results {
        println!("{}", r.line());
    }
    if verify::all_passed(&results) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_koopman_fit(args: KoopmanFitArgs) -> Result<ExitCode, Error> {
    let states = read_trajectory(&args.trajectory)?;
    if states.len() < 2 {
        return Err(Error::Config(format!(
            "{}: need at least 2 states for snapshot pairs",
            args.trajectory.display()
        )));
    }
    let dim = states[0].len();
    let dictionary = parse_dictionary(&args.dictionary, dim)?;
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = states
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect();
    let (k, residual) = koopman::edmd_fit(&pairs, &dictionary, args.lambda)?;
    println!(
        "fitted {}x{} operator from {} pairs; mean squared residual {residual:.3e}",
        k.nrows(),
        k.ncols(),
        pairs.len()
    );
    for i in 0..k.nrows() {
        let row: Vec<String> = (0..k.ncols()).map(|j| format!("{:>12.6}", k[(i, j)])).collect();
        println!("  [{}]", row.join(", "));
    }
    let rho = kalman_learn::linalg::spectral_radius(&k);
    println!("spectral radius {rho:.6}{}", if rho >= 1.0 { " (unstable)" } else { "" });
    Ok(ExitCode::SUCCESS)
}

fn read_trajectory(path: &Path) -> Result<Vec<DVector<f64>>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse()).collect();
        let values = values
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(first) = out.first() {
            let first: &DVector<f64> = first;
            if first.len() != values.len() {
                return Err(Error::Config(format!(
                    "{}:{}: row has {} entries, expected {}",
                    path.display(),
                    i + 1,
                    values.len(),
                    first.len()
                )));
            }
        }
        out.push(DVector::from_vec(values));
    }
    Ok(out)
}

fn parse_dictionary(spec: &str, dim: usize) -> Result<Dictionary, Error> {
    if spec == "identity" {
        return Ok(Dictionary::identity(dim));
    }
    if spec == "quadratic-benchmark" {
        if dim != 2 {
            return Err(Error::Config(format!(
                "quadratic-benchmark dictionary needs 2-dim states, got {dim}"
            )));
        }
        return Ok(koopman::quadratic_benchmark_dictionary());
    }
    if let Some(degree) = spec.strip_prefix("monomials:") {
        let degree: u32 = degree
            .parse()
            .map_err(|e| Error::Config(format!("bad monomial degree `{degree}`: {e}")))?;
        return Ok(Dictionary::monomials(dim, degree));
    }
    Err(Error::Config(format!(
        "unknown dictionary `{spec}` (expected identity | monomials:DEGREE | quadratic-benchmark)"
    )))
}

fn cmd_observer_demo(args: ObserverDemoArgs) -> Result<ExitCode, Error> {
    if !(0.0..=1.0).contains(&args.dropout) {
        return Err(Error::Config("dropout must be in [0, 1]".into()));
    }
    let model = ToyDecoder::random(args.hidden, args.vocab, args.seed);
    let table = observer::shift_robustness_eval(&model, args.steps, args.dropout, args.seed)?;
    println!("mean NLL over {} steps (dropout p = {}):", args.steps, args.dropout);
    println!("  clean     uncorrected {:.6}  corrected {:.6}", table.clean_uncorrected, table.clean_corrected);
    println!("  perturbed uncorrected {:.6}  corrected {:.6}", table.perturbed_uncorrected, table.perturbed_corrected);
    let improved = table.perturbed_corrected < table.perturbed_uncorrected;
    println!(
        "correction under dropout: {}",
        if improved { "improves NLL" } else { "does not improve NLL" }
    );
    Ok(ExitCode::SUCCESS)
}
