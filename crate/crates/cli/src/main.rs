use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossed_lmm::oracle::{self_check, VERIFY_LIMIT};
use crossed_lmm::pipeline::Stopwatch;
use crossed_lmm::simulator::{bench_one, loglog_slope, mse_slopes, write_bench_csv, write_study_csv};
use crossed_lmm::{
    fit, index_dataset, mc_study, open_path, simulate_crossed, DedupPolicy, EffectDist, Fill, FitOptions,
    IndexedDataset, ModeChoice, Schema, SimConfig,
};

const VERIFY_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "crossed-lmm",
    version,
    about = "Moment-based fits of crossed random-effects linear models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a delimited file and write the result as JSON.
    Fit(FitArgs),
    /// Simulate one crossed dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Monte Carlo study over a grid of sample sizes.
    Study(StudyArgs),
    /// Time fits of simulated data at several sizes.
    Bench(BenchArgs),
    /// Compare the streaming estimators with dense computations on (a subsample of) a file.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Auto,
    Row,
    Col,
    BothCompare,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dedup {
    KeepLast,
    KeepFirst,
    Error,
    AssumeUnique,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    /// Field delimiter (single byte).
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// The file has no header line.
    #[arg(long)]
    no_header: bool,
    #[arg(long, value_enum, default_value = "assume-unique")]
    dedup: Dedup,
}

#[derive(Args)]
struct ScanArgs {
    /// Parallel scan shards. Defaults to CROSSED_LMM_THREADS, then the number of cores.
    #[arg(long, env = "CROSSED_LMM_THREADS")]
    shards: Option<usize>,
    /// Reduce shard results in a fixed order so results do not depend on the shard count.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    scan: ScanArgs,
    #[arg(long, value_enum, default_value = "auto")]
    mode: Mode,
    /// Coefficient whose standard error decides between row and column GLS in both-compare mode.
    #[arg(long)]
    compare_coef: Option<usize>,
    /// Compute the asymptotic-normality diagnostics (one extra pass).
    #[arg(long)]
    diagnostics: bool,
    /// JSON destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Observe exactly this many cells.
    #[arg(long, conflicts_with = "fill_prob", required_unless_present = "fill_prob")]
    fill_count: Option<u64>,
    /// Observe each cell with this probability.
    #[arg(long)]
    fill_prob: Option<f64>,
    /// Covariates besides the intercept.
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Coefficients, intercept first (p + 1 values). Defaults to all ones.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    #[command(flatten)]
    effects: EffectArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EffectArgs {
    /// Row, column and noise variances.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "2,0.5,1")]
    vc: Vec<f64>,
    /// One distribution for all three effects, or three comma-separated ones.
    #[arg(long, value_delimiter = ',', default_value = "gaussian")]
    dist: Vec<String>,
}

#[derive(Args)]
struct StudyArgs {
    /// Target sample sizes; each uses a square design with R = C = 2 sqrt(N) and a quarter of the cells observed.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<usize>,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[command(flatten)]
    effects: EffectArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse one observation pattern for every replicate of a cell.
    #[arg(long)]
    fix_pattern: bool,
    /// Replicates fitted concurrently. Defaults to CROSSED_LMM_THREADS, then the number of cores.
    #[arg(long, env = "CROSSED_LMM_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value = "auto")]
    mode: Mode,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fits per size; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    scan: ScanArgs,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    scan: ScanArgs,
    /// Seed of the row/column subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure to report: message for stderr and the exit status.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

/// Library error about `path`; I/O errors already name it.
fn about(path: &Path, e: crossed_lmm::Error) -> Failure {
    match e {
        crossed_lmm::Error::Io { .. } => Failure(e.to_string()),
        e => Failure(format!("{}: {e}", path.display())),
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl ScanArgs {
    fn options(&self) -> FitOptions {
        FitOptions {
            shards: self.shards.unwrap_or_else(default_threads).max(1),
            deterministic_reduction: self.deterministic,
            ..FitOptions::default()
        }
    }
}

impl From<Mode> for ModeChoice {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Auto => ModeChoice::Auto,
            Mode::Row => ModeChoice::Row,
            Mode::Col => ModeChoice::Col,
            Mode::BothCompare => ModeChoice::BothCompare,
        }
    }
}

impl From<Dedup> for DedupPolicy {
    fn from(d: Dedup) -> Self {
        match d {
            Dedup::KeepLast => DedupPolicy::KeepLast,
            Dedup::KeepFirst => DedupPolicy::KeepFirst,
            Dedup::Error => DedupPolicy::Error,
            Dedup::AssumeUnique => DedupPolicy::AssumeUnique,
        }
    }
}

impl InputArgs {
    fn load(&self) -> Result<IndexedDataset, Failure> {
        let in_file = |e| about(&self.input, e);
        if !self.delimiter.is_ascii() {
            return Err(Failure(format!("delimiter {:?} is not a single byte", self.delimiter)));
        }
        let schema = Schema {
            covariates: None,
            delimiter: self.delimiter as u8,
            has_header: !self.no_header,
        };
        let source = open_path(&self.input, &schema).map_err(in_file)?;
        index_dataset(source, self.dedup.into()).map_err(in_file)
    }
}

impl EffectArgs {
    fn components(&self) -> Result<[f64; 3], Failure> {
        <[f64; 3]>::try_from(self.vc.as_slice())
            .map_err(|_| Failure(format!("--vc takes three values a,b,e, got {}", self.vc.len())))
    }

    fn distributions(&self) -> Result<[EffectDist; 3], Failure> {
        let parsed = self
            .dist
            .iter()
            .map(|s| EffectDist::parse(s.trim()).ok_or_else(|| Failure(format!("unknown distribution {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        match parsed.as_slice() {
            [d] => Ok([*d; 3]),
            [a, b, e] => Ok([*a, *b, *e]),
            _ => Err(Failure(format!(
                "--dist takes one or three values, got {}",
                parsed.len()
            ))),
        }
    }
}

/// Runs `write` against the file at `path`, or standard output.
fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Failure> {
    let described = |e: io::Error| match path {
        Some(p) => Failure(format!("cannot write {}: {e}", p.display())),
        None => Failure(format!("cannot write to standard output: {e}")),
    };
    match path {
        Some(p) => {
            let mut out = BufWriter::new(File::create(p).map_err(described)?);
            write(&mut out).and_then(|_| out.flush()).map_err(described)
        }
        None => {
            let stdout = io::stdout();
            let mut out = stdout.lock();
            write(&mut out).and_then(|_| out.flush()).map_err(described)
        }
    }
}

fn cmd_fit(args: &FitArgs) -> CmdResult {
    let clock = Stopwatch::start();
    let ds = args.input.load()?;
    let indexing = clock.seconds();
    let opts = FitOptions {
        mode: args.mode.into(),
        dedup_policy: args.input.dedup.into(),
        emit_diagnostics: args.diagnostics,
        compare_coef: args.compare_coef,
        ..args.scan.options()
    };
    let result = fit(&ds, &opts).map_err(|e| about(&args.input.input, e))?;
    emit(args.output.as_deref(), |out| {
        serde_json::to_writer_pretty(&mut *out, &result)?;
        writeln!(out)
    })?;
    eprintln!(
        "N = {}, R = {}, C = {}; indexed in {indexing:.3}s, fitted in {:.3}s",
        result.profile.n, result.profile.r, result.profile.c, result.timings.total
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if result.warnings.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let fill = match (args.fill_count, args.fill_prob) {
        (Some(m), _) => Fill::Count(m),
        (None, Some(q)) => Fill::Prob(q),
        (None, None) => return Err(Failure("one of --fill-count or --fill-prob is required".into())),
    };
    let cfg = SimConfig {
        rows: args.rows,
        cols: args.cols,
        fill,
        p: args.p,
        beta: args.beta.clone().unwrap_or_else(|| vec![1.0; args.p + 1]),
        vc: args.effects.components()?,
        dist: args.effects.distributions()?,
        seed: args.seed,
        fix_pattern: false,
    };
    let (ds, _) = simulate_crossed(&cfg)?;
    emit(args.output.as_deref(), |out| {
        crossed_lmm::ingest::write_csv(&ds, out).map_err(io::Error::other)
    })?;
    let prof = ds.profile();
    eprintln!("simulated N = {}, R = {}, C = {}", prof.n, prof.rows(), prof.cols());
    Ok(ExitCode::SUCCESS)
}

fn cmd_study(args: &StudyArgs) -> CmdResult {
    let vc = args.effects.components()?;
    let dist = args.effects.distributions()?;
    let grid: Vec<SimConfig> = args
        .grid
        .iter()
        .map(|&n| SimConfig {
            vc,
            dist,
            fix_pattern: args.fix_pattern,
            ..SimConfig::square_design(n, args.p, args.seed)
        })
        .collect();
    let opts = FitOptions {
        mode: args.mode.into(),
        ..FitOptions::default()
    };
    let threads = args.threads.unwrap_or_else(default_threads).max(1);
    let cells = mc_study(&grid, args.reps, &opts, threads)?;
    emit(args.output.as_deref(), |out| write_study_csv(&cells, out))?;
    for cell in &cells {
        for f in &cell.failures {
            eprintln!("warning: R = {}: {f}", cell.config.rows);
        }
    }
    let slopes = mse_slopes(&cells);
    if !slopes.is_empty() {
        eprintln!("log-log MSE slope against N:");
        for (param, slope) in slopes {
            eprintln!("  {param:>10} {slope:+.3}");
        }
    }
    let failed = cells.iter().any(|c| !c.failures.is_empty());
    Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let opts = args.scan.options();
    let mut rows = Vec::with_capacity(args.sizes.len());
    for &n in &args.sizes {
        let row = bench_one(n, args.p, args.seed, args.repeats, &opts)?;
        eprintln!("N = {:>9}: {:.4}s", row.n, row.secs);
        rows.push(row);
    }
    emit(args.output.as_deref(), |out| write_bench_csv(&rows, out))?;
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let secs: Vec<f64> = rows.iter().map(|r| r.secs).collect();
    if let Some(slope) = loglog_slope(&ns, &secs) {
        eprintln!("log-log time slope against N: {slope:.3}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let ds = args.input.load()?;
    let opts = args.scan.options();
    if ds.n() as usize > VERIFY_LIMIT {
        eprintln!(
            "note: {} has {} records; comparing on a random row/column subsample of at most {VERIFY_LIMIT}",
            args.input.input.display(),
            ds.n()
        );
    }
    let rep = self_check(&ds, args.seed, opts.plan()).map_err(|e| about(&args.input.input, e))?;
    println!(
        "sample: N = {} of {}, R = {}, C = {}; components ({:.4}, {:.4}, {:.4})",
        rep.n, rep.n_source, rep.rows, rep.cols, rep.vc[0], rep.vc[1], rep.vc[2]
    );
    for (name, value) in [
        ("u-statistics", rep.u_statistics),
        ("row GLS beta", rep.rls_beta),
        ("column GLS beta", rep.cls_beta),
        ("row GLS covariance", rep.rls_cov),
        ("column GLS covariance", rep.cls_cov),
        ("OLS sandwich", rep.ols_sandwich),
    ] {
        let flag = if value <= VERIFY_TOL { "ok" } else { "FAIL" };
        println!("  {name:<22} {value:.3e} {flag}");
    }
    if rep.max_discrepancy() <= VERIFY_TOL {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure(format!(
            "largest discrepancy {:.3e} exceeds {VERIFY_TOL:e}",
            rep.max_discrepancy()
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Study(a) => cmd_study(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
