//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::averaging::{soup, RunningAverage, DEFAULT_SOUP_K};
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, ExternalCommand};
use crate::protocol::{run_protocol, ProtocolConfig, ProtocolTable, Sampling, Strategy};
use crate::registry::{load_manifest, FileWeights, Run, RunPool, SplitFamily, WeightStore};
use crate::report::{grid_from_pool, render, render_grid, Baseline, Format, GridTable, HighlightRule};
use crate::selection::{build_variant, max_src_dev, max_trg_dev, Variant};
use crate::synthgen::{generate, SynthConfig, SynthTruth};
use crate::tensor_store::{load_tensormap_with, save_tensormap_with, CodecOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_EXTERNAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "snapsoup",
    version,
    about = "Snapshot averaging and model selection for fine-tuning run pools"
)]
struct Cli {
    /// Worker threads for averaging and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Accept NaN/Inf values in TPAK files.
    #[arg(long, global = true)]
    allow_nonfinite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest and score files; print a pool summary.
    Validate(ValidateArgs),
    /// Uniformly average TPAK files.
    Average(AverageArgs),
    /// Average the k snapshots with the best source-dev scores.
    Soup(SoupArgs),
    /// Build one run's variant model.
    Select(SelectArgs),
    /// Pick the best run for a variant by source or target dev.
    Best(BestArgs),
    /// Run the sampling protocol and write a result table.
    Protocol(ProtocolArgs),
    /// Generate a synthetic run pool.
    Synth(SynthArgs),
    /// Render a protocol table or a per-config grid.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Score files (CSV or JSONL); may be repeated.
    #[arg(long)]
    scores: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    pool: PoolArgs,
    /// Decode every weight file and check shapes agree within each run.
    #[arg(long)]
    check_weights: bool,
}

#[derive(Args, Debug)]
struct AverageArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SoupArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long, default_value_t = DEFAULT_SOUP_K)]
    k: usize,
    /// Restrict candidates to these runs (comma separated).
    #[arg(long, value_delimiter = ',')]
    runs: Vec<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long)]
    run: String,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    metric: Option<String>,
    /// Write the variant's weights here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum By {
    SrcDev,
    TrgDev,
}

#[derive(Args, Debug)]
struct BestArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, value_enum, default_value = "src-dev")]
    by: By,
    #[arg(long, value_delimiter = ',')]
    runs: Vec<String>,
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvaluatorKind {
    Table,
    Synthetic,
    External,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long, value_enum, default_value = "table")]
    evaluator: EvaluatorKind,
    /// truth.json of a synthetic pool (synthetic evaluator).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Command template with {model} and {split} (external evaluator).
    #[arg(long)]
    command: Option<String>,
    #[arg(long, default_value_t = 10)]
    r_max: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "last,src-dev,ca")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "max-src-dev,accumulative-avg")]
    strategies: Vec<Strategy>,
    #[arg(long)]
    metric: Option<String>,
    /// Split family the cells report.
    #[arg(long, value_parser = parse_family, default_value = "test")]
    eval_family: SplitFamily,
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
    /// Sample over all runs instead of distinct configs.
    #[arg(long)]
    all_runs: bool,
    /// Draw a fresh sample for every r instead of growing one.
    #[arg(long)]
    fresh: bool,
    #[arg(long, default_value_t = DEFAULT_SOUP_K)]
    soup_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 21)]
    configs: usize,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 10)]
    snapshots: u32,
    #[arg(long)]
    sigma_noise: Option<f64>,
    #[arg(long)]
    sigma_bias: Option<f64>,
    #[arg(long)]
    sigma_config: Option<f64>,
    #[arg(long)]
    sigma_init: Option<f64>,
    #[arg(long)]
    sigma_lang: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    delta_src_trg: Option<f64>,
    #[arg(long)]
    languages: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Protocol table or grid JSON.
    #[arg(long = "in", required_unless_present = "manifest")]
    input: Option<PathBuf>,
    /// Build a per-config grid from a pool instead of reading --in.
    #[arg(long, requires = "scores")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    scores: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "last,src-dev,ca,trg-dev")]
    variants: Vec<Variant>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long, value_parser = parse_format, default_value = "markdown")]
    format: Format,
    #[arg(long, value_parser = parse_baseline, default_value = "best-in-row")]
    baseline: Baseline,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<SplitFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
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
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let opts = CodecOptions {
        allow_nonfinite: cli.allow_nonfinite,
    };
    match dispatch(cli.command, opts) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::External(_) => EXIT_EXTERNAL,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command, opts: CodecOptions) -> Result<()> {
    match cmd {
        Command::Validate(a) => validate(a, opts),
        Command::Average(a) => average(a, opts),
        Command::Soup(a) => soup_cmd(a, opts),
        Command::Select(a) => select(a, opts),
        Command::Best(a) => best(a),
        Command::Protocol(a) => protocol(a, opts),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    }
}

fn load_pool(args: &PoolArgs) -> Result<RunPool> {
    let mut pool = load_manifest(&args.manifest)?;
    for path in &args.scores {
        pool.ingest_scores(path)?;
    }
    for w in pool.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(pool)
}

/// The metric to use: the flag, else the pool's only metric, else "accuracy".
fn resolve_metric(flag: Option<String>, pool: &RunPool) -> Result<String> {
    if let Some(m) = flag {
        return Ok(m);
    }
    let metrics = pool.metrics();
    match metrics.len() {
        0 => Ok("accuracy".into()),
        1 => Ok(metrics.iter().next().cloned().expect("one metric")),
        _ => Err(Error::Config(format!(
            "pool has several metrics ({}); pass --metric",
            metrics.iter().cloned().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn has_weights(pool: &RunPool) -> bool {
    pool.runs()
        .iter()
        .all(|r| r.snapshots.iter().all(|s| s.weights_path.is_some()))
}

fn select_runs<'p>(pool: &'p RunPool, ids: &[String]) -> Result<Vec<&'p Run>> {
    if ids.is_empty() {
        Ok(pool.runs().iter().collect())
    } else {
        ids.iter().map(|id| pool.require_run(id)).collect()
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"), out)
}

fn validate(a: ValidateArgs, opts: CodecOptions) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    if a.check_weights {
        let store = FileWeights { opts };
        for run in pool.runs() {
            let mut avg = RunningAverage::new();
            for index in run.indices() {
                avg.push(&store.load(run, index)?)?;
            }
        }
    }
    let mut line = format!(
        "{} runs, {} snapshots, {} configs, {} score records",
        pool.runs().len(),
        pool.total_snapshots(),
        pool.configs().len(),
        pool.n_records()
    );
    if !pool.metrics().is_empty() {
        line.push_str(&format!(
            ", metrics: {}",
            pool.metrics().iter().cloned().collect::<Vec<_>>().join(",")
        ));
    }
    emit(&(line + "\n"), None)
}

fn average(a: AverageArgs, opts: CodecOptions) -> Result<()> {
    let mut avg = RunningAverage::new();
    for path in &a.inputs {
        avg.push(&load_tensormap_with(path, opts)?)?;
    }
    let mut out = avg.finalize()?;
    if a.inputs.len() > 1 {
        let labels: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
        out.set_meta(crate::averaging::META_CONSTITUENTS, labels.join(","));
    }
    save_tensormap_with(&out, &a.out, opts)
}

fn soup_cmd(a: SoupArgs, opts: CodecOptions) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    let metric = resolve_metric(a.metric, &pool)?;
    let runs = select_runs(&pool, &a.runs)?;
    let tm = soup(&pool, &runs, a.k, &metric, &FileWeights { opts })?;
    save_tensormap_with(&tm, &a.out, opts)
}

fn select(a: SelectArgs, opts: CodecOptions) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    let metric = resolve_metric(a.metric, &pool)?;
    let run = pool.require_run(&a.run)?;
    let store = FileWeights { opts };
    let want = a.out.is_some();
    if want && a.variant == Variant::TrgDev {
        return Err(Error::Config(
            "trg-dev picks one snapshot per language; it has no single weight map".into(),
        ));
    }
    let model = build_variant(
        &pool,
        run,
        a.variant,
        &metric,
        want.then_some(&store as &dyn WeightStore),
    )?;
    if let (Some(out), Some(w)) = (&a.out, &model.weights) {
        save_tensormap_with(w, out, opts)?;
    }
    emit_json(&model, None)
}

#[derive(Serialize)]
struct BestOut<'a> {
    run_id: &'a str,
    variant: Variant,
    by: &'static str,
    validation: f64,
    oracle: bool,
    test_mean: Option<f64>,
    model: &'a crate::selection::VariantModel,
}

fn best(a: BestArgs) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    let metric = resolve_metric(a.metric, &pool)?;
    let runs = select_runs(&pool, &a.runs)?;
    let models = runs
        .iter()
        .map(|run| build_variant(&pool, run, a.variant, &metric, None))
        .collect::<Result<Vec<_>>>()?;
    let (sel, by) = match a.by {
        By::SrcDev => (max_src_dev(&models)?, "src-dev"),
        By::TrgDev => (max_trg_dev(&models)?, "trg-dev"),
    };
    emit_json(
        &BestOut {
            run_id: &sel.model.run_id,
            variant: a.variant,
            by,
            validation: sel.score,
            oracle: sel.oracle,
            test_mean: sel.model.scores.mean(SplitFamily::Test),
            model: sel.model,
        },
        None,
    )
}

fn protocol(a: ProtocolArgs, opts: CodecOptions) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    let ev = match a.evaluator {
        EvaluatorKind::Table => Evaluator::ScoreTable,
        EvaluatorKind::Synthetic => {
            let path = a
                .truth
                .as_ref()
                .ok_or_else(|| Error::Config("the synthetic evaluator needs --truth".into()))?;
            Evaluator::SyntheticQuadratic(SynthTruth::load(path)?.evaluator)
        }
        EvaluatorKind::External => {
            let cmd = a
                .command
                .clone()
                .ok_or_else(|| Error::Config("the external evaluator needs --command".into()))?;
            Evaluator::External(ExternalCommand::new(cmd)?)
        }
    };
    let metric = resolve_metric(a.metric, &pool)?;
    let cfg = ProtocolConfig {
        r_max: a.r_max,
        repetitions: a.reps,
        variants: a.variants,
        strategies: a.strategies,
        rng_seed: a.seed,
        metric,
        eval_family: a.eval_family,
        languages: a.languages,
        sampling: if a.all_runs {
            Sampling::AllRuns
        } else {
            Sampling::DistinctConfigs
        },
        nested: !a.fresh,
        soup_k: a.soup_k,
    };
    let store = FileWeights { opts };
    let store_ref = has_weights(&pool).then_some(&store as &dyn WeightStore);
    let table = run_protocol(&pool, &ev, store_ref, &cfg)?;
    emit_json(&table, a.out.as_deref())
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        dim: a.dim,
        n_configs: a.configs,
        seeds_per_config: a.seeds,
        snapshots_per_run: a.snapshots,
        sigma_noise: a.sigma_noise.unwrap_or(d.sigma_noise),
        sigma_bias: a.sigma_bias.unwrap_or(d.sigma_bias),
        sigma_config: a.sigma_config.unwrap_or(d.sigma_config),
        sigma_init: a.sigma_init.unwrap_or(d.sigma_init),
        sigma_lang: a.sigma_lang.unwrap_or(d.sigma_lang),
        decay: a.decay.unwrap_or(d.decay),
        delta_src_trg: a.delta_src_trg.unwrap_or(d.delta_src_trg),
        languages: a.languages.unwrap_or(d.languages),
        rng_seed: a.seed,
        ..d
    };
    let pool = generate(&cfg)?;
    pool.write(&a.out)?;
    emit(
        &format!(
            "wrote {} runs, {} snapshots to {}\n",
            pool.pool.runs().len(),
            pool.pool.total_snapshots(),
            a.out.display()
        ),
        None,
    )
}

fn report(a: ReportArgs) -> Result<()> {
    if let Some(manifest) = &a.manifest {
        let pool = load_pool(&PoolArgs {
            manifest: manifest.clone(),
            scores: a.scores.clone(),
        })?;
        let metric = resolve_metric(a.metric, &pool)?;
        let grid = grid_from_pool(&pool, &a.variants, &metric, SplitFamily::Test)?;
        return emit(&render_grid(&grid, a.format)?, a.out.as_deref());
    }
    let path = a.input.as_ref().expect("clap enforces --in or --manifest");
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let rendered = if value.get("columns").is_some() {
        let grid: GridTable = serde_json::from_value(value)?;
        render_grid(&grid, a.format)?
    } else {
        let table: ProtocolTable = serde_json::from_value(value)?;
        render(&table, a.format, &HighlightRule::with_baseline(a.baseline))?
    };
    emit(&rendered, a.out.as_deref())
}
