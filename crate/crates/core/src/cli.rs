//! Command implementations behind the `audiotoolagent` binary.
//!
//! Exit status: 0 on success (for `run`, only when the session answered),
//! 1 when a session or attribution run fails, 2 for configuration, input or
//! output errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::agent::{run_session, AgentSetup, AudioTask, Role, SessionOutcome, SessionTrace};
use crate::bench::{
    convert_dataset, emit_report, load_dataset, run_benchmark, subsample, BenchOptions, BenchmarkReport, Dataset,
    DatasetOptions, SourceFormat,
};
use crate::config::AppConfig;
use crate::serve::{serve, ServeOptions, DEFAULT_RETENTION};
use crate::shapley::{
    emit_attribution_plot_data, estimate_shapley_with_cache, exact_shapley_with_cache, BenchmarkValue, CoalitionValue,
    EstimatorConfig, MemoCache, ShapleyEstimate, ShapleyRun, TableGame, DEFAULT_MIN_PREDECESSOR_SIZE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "audiotoolagent",
    version,
    about = "Answer audio questions with a text-only agent and audio-language tools"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question.
    Run(RunArgs),
    /// Run a dataset under one or more seeds and write report files.
    Bench(BenchArgs),
    /// Estimate each tool's Shapley contribution to benchmark accuracy.
    Shapley(ShapleyArgs),
    /// Validate a config file and list its tools.
    Check(CheckArgs),
    /// Serve sessions over HTTP with server-sent events.
    Serve(ServeArgs),
    /// Convert MMAU, MMAR or MMAU-Pro JSON into a dataset file.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Audio file (repeat for multi-audio questions).
    #[arg(long = "audio", required = true)]
    pub audio: Vec<String>,
    #[arg(long)]
    pub question: String,
    /// Answer choice (repeat, in order).
    #[arg(long = "choice")]
    pub choices: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the full session trace as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory that relative audio paths are resolved against.
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Fraction of the dataset to use.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Seed for choosing the subsample.
    #[arg(long, default_value_t = 0)]
    pub subsample_seed: u64,
    /// Agent seeds, one benchmark pass each.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShapleyArgs {
    /// Config whose tools form the players; not needed with --synthetic.
    #[arg(long, required_unless_present = "synthetic")]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub subsample_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Value table to use instead of benchmark runs.
    #[arg(long, conflicts_with_all = ["config", "dataset"])]
    pub synthetic: Option<PathBuf>,
    /// Players; defaults to every tool.
    #[arg(long, value_delimiter = ',')]
    pub tools: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub n_permutations: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_PREDECESSOR_SIZE)]
    pub min_predecessor_size: usize,
    /// Seed for the permutation stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append-only coalition value cache; reused across runs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Coalition evaluations in flight at once.
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Also enumerate all permutations and compare.
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Directory with the built web UI.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Finished sessions kept for replay.
    #[arg(long, default_value_t = DEFAULT_RETENTION)]
    pub retention: usize,
    #[arg(long)]
    pub upload_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// mmau, mmar or mmau-pro
    #[arg(long)]
    pub format: SourceFormat,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// A failed command: message plus exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

fn failed(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_FAILED,
        message: message.to_string(),
    }
}

type CmdResult = Result<i32, Failure>;

/// Parse arguments, run the command and return the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: failed to start runtime: {e}");
            return EXIT_USAGE;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match runtime.block_on(execute(cli.command, &mut out)) {
        Ok(code) => code,
        Err(f) => {
            let _ = out.flush();
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub async fn execute(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Run(a) => cmd_run(a, out).await,
        Command::Bench(a) => cmd_bench(a, out).await,
        Command::Shapley(a) => cmd_shapley(a, out).await,
        Command::Check(a) => cmd_check(a, out),
        Command::Serve(a) => cmd_serve(a).await,
        Command::Convert(a) => cmd_convert(a, out),
    }
}

fn load_setup(path: &Path) -> Result<AgentSetup, Failure> {
    AgentSetup::load(path).map_err(usage)
}

fn io_fail(e: std::io::Error) -> Failure {
    usage(format!("failed to write output: {e}"))
}

pub fn print_trace_summary(trace: &SessionTrace, out: &mut dyn Write) -> std::io::Result<()> {
    let mut index = 0;
    for turn in &trace.turns {
        if turn.role != Role::Tool {
            continue;
        }
        index += 1;
        let Some(call) = &turn.call else { continue };
        let status = match &turn.result {
            Some(r) if r.error.is_some() => "error".to_string(),
            Some(r) if r.refusal => format!("refusal, {} attempt(s)", r.attempts),
            Some(r) => format!("ok, {} attempt(s), {:.2}s", r.attempts, r.latency.as_secs_f64()),
            None => "rejected".to_string(),
        };
        let prompt: String = call.prompt.chars().take(60).collect();
        writeln!(out, "  {index:>2}. {} [{status}] {prompt}", call.tool_name)?;
    }
    let label = match trace.outcome {
        SessionOutcome::Answered => "answered",
        SessionOutcome::BudgetExhausted => "budget exhausted",
        SessionOutcome::AgentError => "agent error",
    };
    writeln!(
        out,
        "outcome: {label} ({}/{} tool calls)",
        trace.tool_call_count, trace.budget
    )?;
    if let Some(e) = &trace.error {
        writeln!(out, "error: {e}")?;
    }
    Ok(())
}

async fn cmd_run(a: RunArgs, out: &mut dyn Write) -> CmdResult {
    let setup = load_setup(&a.config)?;
    let task = AudioTask {
        id: "cli".into(),
        audio_refs: a.audio,
        question: a.question,
        choices: (!a.choices.is_empty()).then_some(a.choices),
        gold: None,
        categories: Vec::new(),
        broken_audio: false,
    };
    task.validate().map_err(usage)?;
    let trace = run_session(
        &task,
        setup.backend.as_ref(),
        &setup.registry,
        &setup.session_options(a.seed),
    )
    .await;
    if a.json {
        let json = serde_json::to_string_pretty(&trace).expect("serializable");
        writeln!(out, "{json}").map_err(io_fail)?;
    } else {
        match &trace.answer {
            Some(ans) => writeln!(out, "answer: {ans}"),
            None => writeln!(out, "no answer"),
        }
        .map_err(io_fail)?;
        print_trace_summary(&trace, out).map_err(io_fail)?;
    }
    Ok(if trace.outcome == SessionOutcome::Answered {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

fn load_subsample(path: &Path, audio_root: Option<PathBuf>, fraction: f64, seed: u64) -> Result<Dataset, Failure> {
    let ds = load_dataset(path, &DatasetOptions { audio_root }).map_err(usage)?;
    subsample(&ds, fraction, seed).map_err(usage)
}

fn ensure_writable_dir(dir: &Path) -> Result<(), Failure> {
    let fail = |e: std::io::Error| usage(format!("output directory {} is not writable: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".write-check");
    std::fs::write(&probe, b"").map_err(fail)?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn bench_options(setup: &AgentSetup, parallelism: usize) -> BenchOptions {
    BenchOptions {
        parallelism,
        session: setup.session_options(0),
        judge: None,
    }
}

pub fn print_summary(report: &BenchmarkReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{:<24} {:>6} {:>8}", "category", "n", "accuracy")?;
    for (cat, s) in &report.per_category {
        writeln!(out, "{cat:<24} {:>6} {:>8.4}", s.n, s.accuracy)?;
    }
    writeln!(
        out,
        "{:<24} {:>6} {:>8.4}",
        "average (micro)", report.n_items, report.micro_average
    )?;
    writeln!(out, "{:<24} {:>6} {:>8.4}", "average (macro)", "", report.macro_average)?;
    for s in &report.per_seed {
        writeln!(out, "seed {:<19} {:>6} {:>8.4}", s.seed, s.n, s.accuracy)?;
    }
    writeln!(
        out,
        "{:<24} {:>6} {:>8.4}",
        "mean across seeds", "", report.mean_across_seeds
    )
}

async fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> CmdResult {
    let setup = load_setup(&a.config)?;
    let d = a.data;
    let dataset = load_subsample(&d.dataset, d.audio_root, d.fraction, d.subsample_seed)?;
    ensure_writable_dir(&a.out)?;
    let report = run_benchmark(
        &dataset,
        setup.backend.as_ref(),
        &setup.registry,
        &d.seeds,
        &bench_options(&setup, d.parallelism),
    )
    .await
    .map_err(usage)?;
    let files = emit_report(&report, &a.out).map_err(usage)?;
    print_summary(&report, out).map_err(io_fail)?;
    for f in files {
        writeln!(out, "wrote {}", f.display()).map_err(io_fail)?;
    }
    Ok(EXIT_OK)
}

fn write_estimates(run: &ShapleyRun, path: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    if run.estimates.is_empty() {
        writeln!(out, "no tool had a qualifying marginal contribution").map_err(io_fail)?;
        return Ok(());
    }
    for e in &run.estimates {
        writeln!(
            out,
            "{:<24} {:>10.6} ± {:.6} (n={})",
            e.tool_name, e.value, e.std_error, e.n_samples
        )
        .map_err(io_fail)?;
    }
    let files = emit_attribution_plot_data(&run.estimates, path).map_err(usage)?;
    for f in files {
        writeln!(out, "wrote {}", f.display()).map_err(io_fail)?;
    }
    Ok(())
}

fn max_gap(a: &[ShapleyEstimate], b: &[ShapleyEstimate]) -> f64 {
    a.iter()
        .filter_map(|x| {
            b.iter()
                .find(|y| y.tool_name == x.tool_name)
                .map(|y| (x.value - y.value).abs())
        })
        .fold(0.0, f64::max)
}

async fn cmd_shapley(a: ShapleyArgs, out: &mut dyn Write) -> CmdResult {
    let (value, all_tools): (Arc<dyn CoalitionValue>, Vec<String>) = match &a.synthetic {
        Some(game) => {
            let g = TableGame::load(game).map_err(usage)?;
            let tools = g.tools.clone();
            (Arc::new(g), tools)
        }
        None => {
            let cfg_path = a.config.as_ref().expect("required by clap");
            let cfg = AppConfig::load(cfg_path).map_err(usage)?;
            let setup = AgentSetup::from_config(&cfg).map_err(usage)?;
            let dataset = load_subsample(
                a.dataset.as_ref().expect("required by clap"),
                a.audio_root.clone(),
                a.fraction,
                a.subsample_seed,
            )?;
            let tools = setup.registry.names().map(str::to_string).collect();
            let options = bench_options(&setup, a.parallelism);
            let v = BenchmarkValue {
                dataset,
                backend: setup.backend.clone(),
                registry: setup.registry.clone(),
                seeds: a.seeds.clone(),
                options,
            };
            (Arc::new(v), tools)
        }
    };
    let tools = if a.tools.is_empty() {
        all_tools
    } else {
        if let Some(t) = a.tools.iter().find(|t| !all_tools.contains(t)) {
            return Err(usage(format!("unknown tool `{t}`")));
        }
        a.tools.clone()
    };
    ensure_writable_dir(&a.out)?;

    let cache = match &a.cache {
        Some(p) => MemoCache::persistent(p).map_err(usage)?,
        None => MemoCache::in_memory(),
    };
    let cfg = EstimatorConfig {
        n_permutations: a.n_permutations,
        min_predecessor_size: a.min_predecessor_size,
        seed: a.seed,
        cache_path: a.cache.clone(),
        concurrency: a.concurrency,
    };
    let run = match estimate_shapley_with_cache(&tools, value.as_ref(), &cfg, &cache).await {
        Ok(run) => run,
        Err(e) => {
            let resumable = if a.cache.is_some() {
                "; completed coalitions are cached"
            } else {
                ""
            };
            return Err(failed(format!("{e}{resumable}")));
        }
    };
    writeln!(
        out,
        "coalitions needed: {}, evaluated: {}, loaded from cache: {}",
        run.coalitions, run.evaluations, run.loaded_from_cache
    )
    .map_err(io_fail)?;
    write_estimates(&run, &a.out.join("attribution.csv"), out)?;

    if a.exact {
        let exact = exact_shapley_with_cache(&tools, value.as_ref(), a.min_predecessor_size, &cache, a.concurrency)
            .await
            .map_err(|e| {
                if matches!(e, crate::shapley::ShapleyError::TooManyTools { .. }) {
                    usage(e)
                } else {
                    failed(e)
                }
            })?;
        writeln!(out, "exact:").map_err(io_fail)?;
        write_estimates(&exact, &a.out.join("exact.csv"), out)?;
        writeln!(
            out,
            "max |exact - sampled|: {:.3e}",
            max_gap(&exact.estimates, &run.estimates)
        )
        .map_err(io_fail)?;
    }
    Ok(EXIT_OK)
}

fn cmd_check(a: CheckArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = AppConfig::load(&a.config).map_err(usage)?;
    let setup = AgentSetup::from_config(&cfg).map_err(usage)?;
    let mut missing = Vec::new();
    let section = cfg.agent.as_ref().expect("validated by setup");
    let kind = format!("{:?}", section.kind).to_lowercase();
    writeln!(out, "agent: {kind} {}", section.model_id).map_err(io_fail)?;
    if let Some(env) = &section.auth_env {
        if std::env::var_os(env).is_none() {
            missing.push(env.clone());
        }
    }
    writeln!(out, "budget: {}", setup.budget).map_err(io_fail)?;
    writeln!(out, "tools ({}):", setup.registry.len()).map_err(io_fail)?;
    for s in setup.registry.specs() {
        let cred = match &s.auth_env {
            Some(env) if std::env::var_os(env).is_none() => {
                missing.push(env.clone());
                format!(" (credential {env} not set)")
            }
            _ => String::new(),
        };
        writeln!(out, "  {} [{}]{cred}", s.name, s.kind).map_err(io_fail)?;
    }
    if missing.is_empty() {
        writeln!(out, "ok").map_err(io_fail)?;
        Ok(EXIT_OK)
    } else {
        Err(failed(format!("missing credentials: {}", missing.join(", "))))
    }
}

async fn cmd_serve(a: ServeArgs) -> CmdResult {
    let setup = load_setup(&a.config)?;
    let mut options = ServeOptions {
        static_dir: a.static_dir,
        retention: a.retention,
        ..ServeOptions::default()
    };
    if let Some(dir) = a.upload_dir {
        options.upload_dir = dir;
    }
    serve(setup, &a.bind, options)
        .await
        .map_err(|e| usage(format!("server on {}: {e}", a.bind)))?;
    Ok(EXIT_OK)
}

fn cmd_convert(a: ConvertArgs, out: &mut dyn Write) -> CmdResult {
    let text = std::fs::read_to_string(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let (records, warnings) = convert_dataset(&text, a.format).map_err(usage)?;
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).expect("serializable"));
        body.push('\n');
    }
    std::fs::write(&a.output, body).map_err(|e| usage(format!("{}: {e}", a.output.display())))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    writeln!(
        out,
        "converted {} item(s), skipped {}, wrote {}",
        records.len(),
        warnings.len(),
        a.output.display()
    )
    .map_err(io_fail)?;
    Ok(EXIT_OK)
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
    fn seeds_parse_as_list() {
        let cli = Cli::try_parse_from([
            "audiotoolagent",
            "bench",
            "--config",
            "c.toml",
            "--dataset",
            "d.jsonl",
            "--out",
            "o",
            "--seeds",
            "1,2,3,4,5",
            "--fraction",
            "0.1",
        ])
        .unwrap();
        match cli.command {
            Command::Bench(b) => {
                assert_eq!(b.data.seeds, vec![1, 2, 3, 4, 5]);
                assert_eq!(b.data.fraction, 0.1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_conflicts_with_config() {
        assert!(Cli::try_parse_from([
            "audiotoolagent",
            "shapley",
            "--synthetic",
            "g.toml",
            "--config",
            "c.toml",
            "--out",
            "o"
        ])
        .is_err());
        assert!(Cli::try_parse_from(["audiotoolagent", "shapley", "--synthetic", "g.toml", "--out", "o"]).is_ok());
    }
}
