//! `orthmerge` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 validation error,
//! 3 I/O or file-format error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use orthmerge::bench::{rows_to_csv, run_benchmark, BenchConfig};
use orthmerge::io::{load_adapter_pack, load_matrix, load_vector, to_json, vector_to_json, write_atomic};
use orthmerge::mask::{sample_masks, MaskDump, MaskKind};
use orthmerge::merge::merge;
use orthmerge::model::{BaseLayer, LowRankAdapter, MergePlan, Strategy};
use orthmerge::rng::{derive_stream, StreamKey};
use orthmerge::verify::{
    analyze_interference, run_consistency_suite, run_orthogonality_suite, run_partition_suite, run_unbiasedness_suite,
    VerifyReport,
};
use orthmerge::Error;

// Merges allocate and free a few hundred KiB per call; glibc's default heap
// trimming turns that into page faults on every call past ~128 KiB.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "orthmerge",
    version,
    about = "Merge low-rank adapter outputs with (orthogonal) Monte-Carlo dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Direct,
    Dropout,
    Orthogonal,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Direct => Strategy::Direct,
            StrategyArg::Dropout => Strategy::McDropout,
            StrategyArg::Orthogonal => Strategy::OrthogonalMcDropout,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    All,
    Consistency,
    Orthogonality,
    Partition,
    Unbiasedness,
}

#[derive(Subcommand)]
enum Command {
    /// Sample dropout masks and write them as JSON.
    SampleMasks {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        rates: Vec<f64>,
        #[arg(long)]
        dim: usize,
        /// Number of mask sets; more than one writes a JSON array of dumps.
        #[arg(long, default_value_t = 1)]
        samples: u64,
        #[arg(long, value_enum, default_value = "orthogonal")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        layer: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge adapter outputs for one input vector.
    Merge {
        /// AdapterPack file.
        #[arg(long)]
        adapters: PathBuf,
        /// Base weight matrix (JSON array of rows).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Input vector (JSON array).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "direct")]
        strategy: StrategyArg,
        /// Dropout rates; default all zero.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rates: Option<Vec<f64>>,
        /// Merge weights; default all one.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        layer: u64,
        /// Reuse a sample index to reuse masks.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long)]
        out: PathBuf,
        /// Audit JSON path; defaults to `<out stem>.audit.json`.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run the statistical verification suites.
    Verify {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        rates: Vec<f64>,
        #[arg(long)]
        dim: usize,
        /// Mask sets per suite.
        #[arg(long, default_value_t = 1000)]
        samples: u64,
        /// Merges averaged by the unbiasedness suite.
        #[arg(long, default_value_t = 20_000)]
        merge_samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Use independent dropout masks instead of orthogonal ones
        /// (orthogonality and unbiasedness suites).
        #[arg(long)]
        force_mc: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report cosine geometry of adapter contributions per strategy.
    Analyze {
        #[arg(long)]
        adapters: PathBuf,
        /// Input vectors (JSON array of rows).
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        weights: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the merge step against the number of adapters; writes CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "4096")]
        dims: Vec<usize>,
        /// Inclusive range such as `1..10` or `1-10`.
        #[arg(long, default_value = "1..10")]
        k_range: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Suite,
    Validation(String),
    Io(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Suite => f.write_str("verification failed"),
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Suite => 1,
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(f) => Failure::Io(f.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_pack(path: &Path) -> CliResult<Vec<LowRankAdapter>> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    load_adapter_pack(&bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn per_adapter(values: Option<Vec<f64>>, k: usize, default: f64, what: &str) -> CliResult<Vec<f64>> {
    match values {
        None => Ok(vec![default; k]),
        Some(v) if v.len() == k => Ok(v),
        Some(v) => Err(Failure::Validation(format!(
            "{} {what} given for {k} adapters",
            v.len()
        ))),
    }
}

fn parse_k_range(s: &str) -> CliResult<std::ops::RangeInclusive<usize>> {
    let bad = || Failure::Validation(format!("bad --k-range '{s}' (expected e.g. 1..10)"));
    let (lo, hi) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .or_else(|| s.split_once('-'))
        .ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || hi < lo {
        return Err(bad());
    }
    Ok(lo..=hi)
}

#[derive(Serialize)]
struct VerifySummary {
    passed: bool,
    reports: Vec<VerifyReport>,
}

fn cmd_sample_masks(
    rates: Vec<f64>,
    dim: usize,
    samples: u64,
    strategy: StrategyArg,
    seed: u64,
    layer: u64,
    out: PathBuf,
) -> CliResult {
    let kind = match strategy {
        StrategyArg::Orthogonal => MaskKind::Orthogonal,
        StrategyArg::Dropout => MaskKind::Independent,
        StrategyArg::Direct => return Err(Failure::Validation("direct merging samples no masks".into())),
    };
    let k = rates.len();
    let dumps = (0..samples)
        .map(|n| {
            let set = sample_masks(kind, &rates, dim, &StreamKey::per_adapter(seed, layer, n, k))?;
            Ok(MaskDump::new(&set, seed))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let text = if dumps.len() == 1 {
        to_json(&dumps[0])
    } else {
        to_json(&dumps)
    };
    write_file(&out, text.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_merge(
    adapters: PathBuf,
    base: Option<PathBuf>,
    input: PathBuf,
    strategy: StrategyArg,
    rates: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
    seed: u64,
    layer: u64,
    sample: u64,
    out: PathBuf,
    audit: Option<PathBuf>,
) -> CliResult {
    let adapters = load_pack(&adapters)?;
    let h = load_vector(&read_text(&input)?).map_err(|e| Failure::Io(format!("{}: {e}", input.display())))?;
    let base = match base {
        None => BaseLayer::absent(),
        Some(p) => {
            let m = load_matrix(&read_text(&p)?).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            BaseLayer::new(m)?
        }
    };
    let k = adapters.len();
    let rates = per_adapter(rates, k, 0.0, "rates")?;
    let weights = per_adapter(weights, k, 1.0, "weights")?;
    let plan = MergePlan::sequential(&weights, &rates, strategy.into(), seed)?;
    let result = merge(&plan, &adapters, &base, &h, layer, sample)?;

    let audit_path = audit.unwrap_or_else(|| out.with_extension("audit.json"));
    write_file(&out, vector_to_json(&result.output).as_bytes())?;
    write_file(&audit_path, to_json(&result.audit(&weights, &rates, seed)).as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    rates: Vec<f64>,
    dim: usize,
    samples: u64,
    merge_samples: u64,
    seed: u64,
    suite: SuiteArg,
    force_mc: bool,
    out: Option<PathBuf>,
) -> CliResult {
    let wants = |s: SuiteArg| suite == SuiteArg::All || suite == s;
    let mask_kind = if force_mc {
        MaskKind::Independent
    } else {
        MaskKind::Orthogonal
    };
    let mut reports = Vec::new();

    if wants(SuiteArg::Consistency) {
        reports.push(run_consistency_suite(&rates, dim, samples, seed)?);
    }
    if wants(SuiteArg::Orthogonality) {
        reports.push(run_orthogonality_suite(&rates, dim, samples, seed, mask_kind)?);
    }
    if wants(SuiteArg::Partition) {
        match run_partition_suite(&rates, dim, samples, seed) {
            Ok(r) => reports.push(r),
            // Only meaningful for saturated rates; skipped under `all`.
            Err(Error::NotSaturated { keep_sum }) if suite == SuiteArg::All => {
                log::info!("partition suite skipped: keep rates sum to {keep_sum}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if wants(SuiteArg::Unbiasedness) {
        let strategy = if force_mc {
            Strategy::McDropout
        } else {
            Strategy::OrthogonalMcDropout
        };
        let mut st = derive_stream(StreamKey::new(seed, u64::MAX, 0, 0));
        let rank = dim.clamp(1, 4);
        let adapters = (0..rates.len())
            .map(|j| LowRankAdapter::random(format!("synthetic{j}"), dim, dim, rank, &mut st))
            .collect::<Result<Vec<_>, Error>>()?;
        let h: Vec<f32> = (0..dim).map(|_| st.uniform_f32(-1.0, 1.0)).collect();
        let plan = MergePlan::sequential(&vec![1.0; rates.len()], &rates, strategy, seed)?;
        reports.push(run_unbiasedness_suite(
            &plan,
            &adapters,
            &BaseLayer::absent(),
            &h,
            merge_samples,
        )?);
    }

    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.suite);
    }
    if let Some(out) = out {
        write_file(&out, to_json(&VerifySummary { passed, reports }).as_bytes())?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Suite)
    }
}

fn cmd_analyze(
    adapters: PathBuf,
    inputs: PathBuf,
    rates: Vec<f64>,
    weights: Option<Vec<f64>>,
    seed: u64,
    out: PathBuf,
) -> CliResult {
    let adapters = load_pack(&adapters)?;
    let inputs = load_matrix(&read_text(&inputs)?)
        .map_err(|e| Failure::Io(format!("{}: {e}", inputs.display())))?
        .to_rows();
    let weights = per_adapter(weights, adapters.len(), 1.0, "weights")?;
    if rates.len() != adapters.len() {
        return Err(Failure::Validation(format!(
            "{} rates given for {} adapters",
            rates.len(),
            adapters.len()
        )));
    }
    let report = analyze_interference(&adapters, &weights, &rates, &inputs, seed)?;
    write_file(&out, report.to_json().as_bytes())
}

fn cmd_bench(
    dims: Vec<usize>,
    k_range: String,
    repeats: usize,
    iters: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> CliResult {
    if dims.contains(&0) || repeats == 0 || iters == 0 {
        return Err(Failure::Validation("dims, repeats and iters must be positive".into()));
    }
    let cfg = BenchConfig {
        dims,
        k_range: parse_k_range(&k_range)?,
        repeats,
        iters,
        seed,
    };
    let csv = rows_to_csv(&run_benchmark(&cfg)?);
    match out {
        Some(path) => write_file(&path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn configure_threads() {
    let Ok(value) = std::env::var("ORTHMERGE_THREADS") else {
        return;
    };
    match value.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not set thread count: {e}");
            }
        }
        Err(_) => log::warn!("ignoring ORTHMERGE_THREADS={value:?}"),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::SampleMasks {
            rates,
            dim,
            samples,
            strategy,
            seed,
            layer,
            out,
        } => cmd_sample_masks(rates, dim, samples, strategy, seed, layer, out),
        Command::Merge {
            adapters,
            base,
            input,
            strategy,
            rates,
            weights,
            seed,
            layer,
            sample,
            out,
            audit,
        } => cmd_merge(
            adapters, base, input, strategy, rates, weights, seed, layer, sample, out, audit,
        ),
        Command::Verify {
            rates,
            dim,
            samples,
            merge_samples,
            seed,
            suite,
            force_mc,
            out,
        } => cmd_verify(rates, dim, samples, merge_samples, seed, suite, force_mc, out),
        Command::Analyze {
            adapters,
            inputs,
            rates,
            weights,
            seed,
            out,
        } => cmd_analyze(adapters, inputs, rates, weights, seed, out),
        Command::Bench {
            dims,
            k_range,
            repeats,
            iters,
            seed,
            out,
        } => cmd_bench(dims, k_range, repeats, iters, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !matches!(f, Failure::Suite) {
                eprintln!("orthmerge: {f}");
            }
            ExitCode::from(f.code())
        }
    }
}
