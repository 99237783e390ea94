//! `iava` command-line driver.
//!
//! Exit codes: 0 success, 2 parse error, 3 invariant violation, 4 usage error,
//! 5 connection error.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use iava_core::decoder::{decode_sequence, DecodeConfig, DecodeError, DecodeMode};
use iava_core::evaluation::{
    format_sweep, format_table, pope_metrics_with_unparsed, run_benchmark, sweep_i, Answer, BenchmarkSettings,
    EvalError, EvalResult,
};
use iava_core::negative_sample::{build_mask, describe_strategy, MaskPolicy, NegativeStrategy, VisualInput};
use iava_core::protocol::trace::{read_traces, TraceError, TraceRecord};
use iava_core::protocol::{fetch_attention, open_session, Endpoint, ModelSession, SessionError, GENERAL_INSTRUCTION};
use iava_core::selection::{select_irrelevant, SelectionParams};
use iava_core::toy::{self, ToyConfig, ToyDataset};

const EXIT_PARSE: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const EXIT_USAGE: u8 = 4;
const EXIT_CONNECTION: u8 = 5;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        Failure::new(EXIT_CONNECTION, e.to_string())
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        let code = match e {
            TraceError::InvariantViolation { .. } => EXIT_INVARIANT,
            _ => EXIT_PARSE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::Session { .. } => EXIT_CONNECTION,
            EvalError::Decode {
                source: DecodeError::Session { .. },
                ..
            } => EXIT_CONNECTION,
            EvalError::Decode { .. } | EvalError::InvalidParams(_) | EvalError::EmptyInput => EXIT_USAGE,
            EvalError::LengthMismatch { .. } | EvalError::Trace { .. } => EXIT_INVARIANT,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "iava",
    version,
    about = "Instruction-aligned visual attention: token selection and contrastive decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select irrelevant image tokens for every record of a trace file.
    Select(SelectArgs),
    /// Run the toy benchmark with one negative-sample strategy.
    Simulate(SimulateArgs),
    /// Sweep the rank cutoff i on the toy benchmark.
    Sweep(SweepArgs),
    /// Score yes/no predictions against gold labels, or replay a trace file.
    Eval(EvalArgs),
    /// Serve the toy model over the wire protocol.
    ServeToy(ServeArgs),
    /// Decode one answer from a model endpoint.
    Decode(DecodeArgs),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Rank cutoff; defaults by token count (32 -> 16, 576 -> 292).
    #[arg(long = "i")]
    rank: Option<usize>,
    /// Standard-deviation multiplier; defaults by token count (32 -> -0.1, 576 -> 0).
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Iava,
    Noise,
    Text,
    None,
}

#[derive(Args, Clone)]
struct ToyArgs {
    /// Number of toy scenes.
    #[arg(long, default_value_t = 1000)]
    n: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Image tokens per toy scene.
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[arg(long, default_value_t = 6)]
    distractors: usize,
    /// Drive a served model instead of the in-process toy.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args, Clone)]
struct MethodArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Iava)]
    strategy: StrategyArg,
    #[arg(long, default_value = "zero-fill")]
    policy: MaskPolicy,
    /// Noise level for `--strategy noise`.
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long = "i")]
    rank: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Comma-separated rank cutoffs.
    #[arg(long = "i-values", value_delimiter = ',', num_args = 0..)]
    i_values: Vec<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// One yes/no answer per line.
    #[arg(long, requires = "gold", conflicts_with = "trace")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    /// Trace file to replay with contrastive decoding over its candidates.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[arg(long, default_value_t = 6)]
    distractors: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    query: String,
    /// Example (image) index on the model side.
    #[arg(long, default_value_t = 0)]
    example: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long = "i")]
    rank: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long, default_value = "zero-fill")]
    policy: MaskPolicy,
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 16)]
    max_steps: usize,
    /// Comma-separated stop token ids.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    stop: Vec<u32>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Skip the negative pass.
    #[arg(long)]
    base_only: bool,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("IAVA_LOG")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let outcome = match cli.command {
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ServeToy(a) => cmd_serve_toy(a),
        Command::Decode(a) => cmd_decode(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_params(n_tokens: usize, rank: Option<usize>, lambda: Option<f64>) -> Result<SelectionParams, Failure> {
    let defaults = SelectionParams::for_token_count(n_tokens);
    let rank = rank
        .or(defaults.map(|d| d.rank))
        .ok_or_else(|| Failure::usage(format!("--i is required: no default rank cutoff for {n_tokens} tokens")))?;
    let lambda = lambda
        .or(defaults.map(|d| d.lambda))
        .ok_or_else(|| Failure::usage(format!("--lambda is required: no default for {n_tokens} tokens")))?;
    if !lambda.is_finite() {
        return Err(Failure::usage("--lambda must be finite"));
    }
    let params = SelectionParams::new(rank, lambda);
    params
        .validate(n_tokens)
        .map_err(|e| Failure::usage(format!("--i: {e}")))?;
    Ok(params)
}

fn write_output(report: Option<&Path>, body: &str) -> CmdResult {
    match report {
        Some(path) => {
            fs::write(path, body).map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
        }
        None => io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Failure::new(1, e.to_string())),
    }
}

fn cmd_select(args: SelectArgs) -> CmdResult {
    if let Some(l) = args.lambda {
        if !l.is_finite() {
            return Err(Failure::usage("--lambda must be finite"));
        }
    }
    let mut out = String::new();
    for record in read_traces(&args.trace)? {
        let record = record?;
        let params = resolve_params(record.n_tokens, args.rank, args.lambda)?;
        let (att1, att2) = record.attention();
        let selection = select_irrelevant(&att1, &att2, params)
            .map_err(|e| Failure::new(EXIT_INVARIANT, format!("record `{}`: {e}", record.id)))?;
        let line = json!({
            "id": record.id,
            "total_tokens": selection.total_tokens(),
            "i": params.rank,
            "lambda": params.lambda,
            "selected": selection.indices(),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    write_output(args.report.as_deref(), &out)
}

fn toy_config(toy: &ToyArgs) -> Result<ToyConfig, Failure> {
    let cfg = ToyConfig {
        n_tokens: toy.tokens,
        n_distractors: toy.distractors,
        seed: toy.seed,
        ..ToyConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn strategy(method: &MethodArgs) -> Result<Option<NegativeStrategy>, Failure> {
    Ok(match method.strategy {
        StrategyArg::Iava => Some(NegativeStrategy::IavaMask { policy: method.policy }),
        StrategyArg::Noise => {
            Some(NegativeStrategy::gaussian_noise(method.noise_sigma).map_err(|e| Failure::usage(e.to_string()))?)
        }
        StrategyArg::Text => Some(NegativeStrategy::TextOnly),
        StrategyArg::None => None,
    })
}

fn strategy_label(s: &Option<NegativeStrategy>) -> String {
    match s {
        Some(s) => describe_strategy(s, None),
        None => "base".into(),
    }
}

fn bench_setup(
    toy: &ToyArgs,
    method: &MethodArgs,
    rank: Option<usize>,
    rank_required: bool,
) -> Result<(Box<dyn ModelSession + Send>, ToyDataset, BenchmarkSettings), Failure> {
    if toy.n == 0 {
        return Err(Failure::usage("--n must be >= 1"));
    }
    let cfg = toy_config(toy)?;
    let strategy = strategy(method)?;
    let mut settings = BenchmarkSettings {
        strategy,
        ..BenchmarkSettings::default()
    };
    settings.decode.alpha = method.alpha;
    settings.decode.seed = toy.seed;
    settings.decode.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let endpoint = match &toy.endpoint {
        Some(addr) => Endpoint::external(addr.clone()),
        None => Endpoint::InProcessToy(cfg.clone()),
    };
    let session = open_session(&endpoint)?;
    let n_tokens = session.dims().n_tokens;
    settings.params = if rank_required {
        resolve_params(n_tokens, rank, method.lambda)?
    } else {
        // the sweep overrides the rank; only lambda must resolve
        resolve_params(n_tokens, Some(0), method.lambda)?
    };
    Ok((session, ToyDataset::new(cfg), settings))
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let (mut session, dataset, settings) = bench_setup(&args.toy, &args.method, args.rank, true)?;
    info!("simulate: {:?}", settings);
    let run = run_benchmark(session.as_mut(), &dataset, &settings, args.toy.n)?;
    let label = strategy_label(&settings.strategy);
    print!("{}", format_table(&[(label.clone(), run.result)]));
    if let Some(path) = &args.report {
        let line = json!({
            "command": "simulate",
            "strategy": label,
            "n": args.toy.n,
            "seed": args.toy.seed,
            "alpha": settings.decode.alpha,
            "i": settings.params.rank,
            "lambda": settings.params.lambda,
            "mean_kept": run.mean_kept,
            "result": run.result,
        });
        write_output(Some(path), &format!("{line}\n"))?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    if args.i_values.is_empty() {
        return Err(Failure::usage("--i-values needs at least one value"));
    }
    let (mut session, dataset, settings) = bench_setup(&args.toy, &args.method, None, false)?;
    let n_tokens = session.dims().n_tokens;
    if let Some(&bad) = args.i_values.iter().find(|&&i| i >= n_tokens) {
        return Err(Failure::usage(format!("--i-values: {bad} outside 0..{n_tokens}")));
    }
    let points = sweep_i(session.as_mut(), &dataset, &args.i_values, &settings, args.toy.n)?;
    print!("{}", format_sweep(&points));
    if let Some(path) = &args.report {
        let mut body = String::new();
        for p in &points {
            let line = json!({
                "command": "sweep",
                "i": p.i,
                "lambda": settings.params.lambda,
                "alpha": settings.decode.alpha,
                "seed": args.toy.seed,
                "n": args.toy.n,
                "score": p.score,
                "mean_kept": p.mean_kept,
                "result": p.result,
            });
            body.push_str(&format!("{line}\n"));
        }
        write_output(Some(path), &body)?;
    }
    Ok(())
}

fn read_answers(path: &Path, strict: bool) -> Result<Vec<Option<Answer>>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_PARSE, format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| match Answer::parse(l) {
            Some(a) => Ok(Some(a)),
            None if !strict => Ok(None),
            None => Err(Failure::new(
                EXIT_PARSE,
                format!("{}:{}: expected yes/no, got `{}`", path.display(), n + 1, l.trim()),
            )),
        })
        .collect()
}

fn report_result(label: &str, result: EvalResult, report: Option<&Path>) -> CmdResult {
    print!("{}", format_table(&[(label.to_string(), result)]));
    if let Some(path) = report {
        let line = json!({ "command": "eval", "method": label, "result": result });
        write_output(Some(path), &format!("{line}\n"))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    if let Some(trace) = &args.trace {
        if !(args.alpha.is_finite() && args.alpha >= 0.0) {
            return Err(Failure::usage("--alpha must be finite and >= 0"));
        }
        let records: Vec<TraceRecord> = read_traces(trace)?.collect::<Result<_, _>>()?;
        let result = iava_core::evaluation::evaluate_traces(&records, args.alpha)?;
        return report_result("trace", result, args.report.as_deref());
    }
    let (pred, gold) = match (&args.pred, &args.gold) {
        (Some(p), Some(g)) => (p, g),
        _ => return Err(Failure::usage("give --pred and --gold, or --trace")),
    };
    let predictions = read_answers(pred, false)?;
    let golds: Vec<Answer> = read_answers(gold, true)?.into_iter().flatten().collect();
    let result = pope_metrics_with_unparsed(&predictions, &golds)?;
    report_result("eval", result, args.report.as_deref())
}

fn cmd_serve_toy(args: ServeArgs) -> CmdResult {
    let cfg = ToyConfig {
        n_tokens: args.tokens,
        n_distractors: args.distractors,
        seed: args.seed,
        ..ToyConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let listener = TcpListener::bind(&args.addr)
        .map_err(|e| Failure::new(EXIT_CONNECTION, format!("cannot bind {}: {e}", args.addr)))?;
    let local = listener
        .local_addr()
        .map_err(|e| Failure::new(EXIT_CONNECTION, e.to_string()))?;
    eprintln!("serving toy model on {local}");
    toy::serve_toy(listener, cfg).map_err(|e| Failure::new(EXIT_CONNECTION, e.to_string()))
}

fn cmd_decode(args: DecodeArgs) -> CmdResult {
    let config = DecodeConfig {
        alpha: args.alpha,
        mode: match args.mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Sample => DecodeMode::Sample,
        },
        temperature: args.temperature,
        max_steps: args.max_steps,
        stop_tokens: args.stop.iter().copied().collect(),
        seed: args.seed,
        plausibility_cutoff: None,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let endpoint = Endpoint::External {
        addr: args.endpoint.clone(),
        timeout: std::time::Duration::from_secs(args.timeout),
    };
    let mut session = open_session(&endpoint)?;
    session.select_example(args.example)?;
    let dims = session.dims();

    let negative = if args.base_only {
        None
    } else {
        let params = resolve_params(dims.n_tokens, args.rank, args.lambda)?;
        let att1 = fetch_attention(session.as_mut(), GENERAL_INSTRUCTION)?;
        let att2 = fetch_attention(session.as_mut(), &args.query)?;
        let selection =
            select_irrelevant(&att1, &att2, params).map_err(|e| Failure::new(EXIT_INVARIANT, e.to_string()))?;
        let mask = build_mask(&selection, args.policy);
        eprintln!(
            "{}",
            describe_strategy(&NegativeStrategy::IavaMask { policy: args.policy }, Some(&mask))
        );
        Some(VisualInput::from(&mask))
    };

    let decoded = decode_sequence(session.as_mut(), &args.query, negative.as_ref(), &config).map_err(|e| match e {
        DecodeError::Session { .. } => Failure::new(EXIT_CONNECTION, e.to_string()),
        other => Failure::new(EXIT_INVARIANT, other.to_string()),
    })?;
    let ids: Vec<String> = decoded.tokens.iter().map(u32::to_string).collect();
    println!("{}", ids.join(" "));
    if dims.vocab_size == toy::VOCAB.len() {
        let words: Vec<&str> = decoded
            .tokens
            .iter()
            .map(|&t| toy::VOCAB.get(t as usize).copied().unwrap_or("?"))
            .collect();
        println!("{}", words.join(" "));
    }
    Ok(())
}
