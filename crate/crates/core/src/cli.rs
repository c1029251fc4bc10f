//! The `anchor` command-line tool. Every subcommand composes library
//! operations; nothing here computes results of its own.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analysis::{dilution_from_records, gradient_attention, length_stats, LengthSample};
use crate::anchoring::{resolve_anchors, Activation, AnchorMode, AnchoringConfig, Markup};
use crate::backend::{wire, Backend, RemoteBackend, ToyModel, ToyModelConfig};
use crate::decoding::{
    anchored_decode_tokens, beam_search_anchored, greedy_decode, read_trace_jsonl, DecodeLimits,
    GenerationTrace,
};
use crate::harness::{evaluate, load_corpus, EvalOptions, EvalReport};
use crate::tuning::{default_grid, grid_search, preset_strength, Evaluator, Tent, TuneSpec};

#[derive(Debug, Parser)]
#[command(name = "anchor", version, about = "Anchored decoding toolkit")]
struct Cli {
    /// Seed for every random choice (toy weights unless given in --backend, fold shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode one prompt.
    Generate(GenerateArgs),
    /// Tune the anchoring strength on a corpus.
    Tune(TuneArgs),
    /// Evaluate a corpus and report Pass@k.
    Eval(EvalArgs),
    /// Derive CSV tables from traces, models and reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Serve a toy model over the line-JSON logit protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Off,
    Fixed,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Always,
    OnFailure,
}

#[derive(Debug, Args)]
struct AnchorArgs {
    /// Anchoring mode; inferred from --omega / --lambda when omitted.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Fixed anchoring strength (1 = unmodified model).
    #[arg(long, allow_negative_numbers = true)]
    omega: Option<f64>,
    /// Confidence-modulated strength coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    /// Combine only the original top-k logits.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum, default_value = "on-failure")]
    activation: ActivationArg,
    #[arg(long, default_value = crate::anchoring::DEFAULT_OPEN)]
    anchor_open: String,
    #[arg(long, default_value = crate::anchoring::DEFAULT_CLOSE)]
    anchor_close: String,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Beam width; greedy when omitted.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// toy[:seed=N:vocab=N:dim=N:layers=N:heads=N:ctx=N] or remote:HOST:PORT
    #[arg(long, default_value = "toy")]
    backend: String,
    /// Prompt with anchored spans delimited by the anchor markers.
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    anchor: AnchorArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Write the per-step trace as line-JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Capture attention rows (needed for dilution curves).
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "toy")]
    backend: String,
    /// Synthetic evaluator instead of decoding: tent:peak=W[:height=H][:slope=S]
    #[arg(long)]
    evaluator: Option<String>,
    /// START:END:STEP or a comma-separated list.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    no_early_exit: bool,
    /// Tune on k-1 folds and hold out one.
    #[arg(long)]
    tune_on_majority: bool,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[command(flatten)]
    anchor: AnchorArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report JSON; a CSV summary is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Attention-to-prompt ratio per step of a trace.
    Dilution {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference input sensitivity of a toy model.
    Gradients {
        #[arg(long, default_value = "toy")]
        backend: String,
        /// Comma-separated token ids.
        #[arg(long, conflicts_with = "prompt")]
        tokens: Option<String>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Length statistics of passed vs failed generations in a report.
    Lengths {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, conflicts_with = "stdio", default_value = "127.0.0.1:7070")]
    listen: String,
    /// Serve on standard input/output instead of TCP.
    #[arg(long)]
    stdio: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Entry point: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn main<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run<I: IntoIterator<Item = OsString>>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Generate(a) => generate(a, cli.seed, out),
        Command::Tune(a) => tune(a, cli.seed, out),
        Command::Eval(a) => eval(a, cli.seed, out),
        Command::Analyze(a) => analyze(a, cli.seed, out),
        Command::Serve(a) => serve(a, cli.seed, out),
    }
}

/// Parse a backend selector.
pub fn parse_backend(spec: &str, default_seed: u64) -> anyhow::Result<Box<dyn Backend>> {
    let mut parts = spec.split(':');
    match parts.next() {
        Some("toy") => {
            let mut cfg = ToyModelConfig {
                seed: default_seed,
                ..ToyModelConfig::reference()
            };
            for kv in parts {
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| anyhow!("expected key=value in backend spec, got {kv:?}"))?;
                let n: u64 = value
                    .parse()
                    .with_context(|| format!("invalid number for {key}"))?;
                let n_usize = usize::try_from(n)?;
                match key {
                    "seed" => cfg.seed = n,
                    "vocab" => cfg.vocab_size = n_usize,
                    "dim" => cfg.embed_dim = n_usize,
                    "layers" => cfg.n_layers = n_usize,
                    "heads" => cfg.n_heads = n_usize,
                    "ctx" => cfg.max_positions = n_usize,
                    other => return Err(anyhow!("unknown toy backend key {other:?}")),
                }
            }
            Ok(Box::new(ToyModel::new(cfg)?))
        }
        Some("remote") => {
            let rest = &spec["remote:".len().min(spec.len())..];
            if rest.is_empty() {
                return Err(anyhow!("remote backend needs HOST:PORT"));
            }
            Ok(Box::new(RemoteBackend::connect(rest)?))
        }
        _ => Err(anyhow!("unknown backend {spec:?}; use toy[:...] or remote:HOST:PORT")),
    }
}

fn markup(a: &AnchorArgs) -> CliResult<Markup> {
    Markup::new(a.anchor_open.clone(), a.anchor_close.clone()).map_err(|e| usage(e.to_string()))
}

/// Validate anchoring flags and build the configuration.
fn anchoring_config(a: &AnchorArgs) -> CliResult<AnchoringConfig> {
    let mode = match (a.mode, a.omega, a.lambda) {
        (Some(ModeArg::Off), Some(_), _) => return Err(usage("--mode off conflicts with --omega")),
        (Some(ModeArg::Off), _, Some(_)) => return Err(usage("--mode off conflicts with --lambda")),
        (Some(ModeArg::Fixed), _, Some(_)) => return Err(usage("--mode fixed conflicts with --lambda")),
        (Some(ModeArg::Confidence), Some(_), _) => {
            return Err(usage("--mode confidence conflicts with --omega"))
        }
        (None, Some(_), Some(_)) => return Err(usage("--omega conflicts with --lambda")),
        (Some(ModeArg::Off), None, None) | (None, None, None) => AnchorMode::Off,
        (Some(ModeArg::Fixed), omega, None) | (None, omega @ Some(_), None) => AnchorMode::Fixed {
            omega: omega.unwrap_or_else(preset_strength),
        },
        (Some(ModeArg::Confidence), None, lambda) | (None, None, lambda @ Some(_)) => {
            AnchorMode::Confidence {
                lambda: lambda.ok_or_else(|| usage("--mode confidence requires --lambda"))?,
            }
        }
    };
    if a.top_k.is_some() && !matches!(mode, AnchorMode::Fixed { .. }) {
        return Err(usage("--top-k requires fixed-strength anchoring (--omega)"));
    }
    Ok(AnchoringConfig {
        mode,
        top_k: a.top_k,
        activation: match a.activation {
            ActivationArg::Always => Activation::Always,
            ActivationArg::OnFailure => Activation::OnTestFailure,
        },
    })
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> CliResult {
    serde_json::to_writer_pretty(&mut *out, value).map_err(anyhow::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn generate(a: GenerateArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let config = anchoring_config(&a.anchor)?;
    let markup = markup(&a.anchor)?;
    if a.decode.beam.is_some() && (a.trace.is_some() || a.attention) {
        return Err(usage("--beam conflicts with --trace/--attention"));
    }
    let backend = parse_backend(&a.backend, seed)?;
    let vocab = backend
        .vocabulary()
        .ok_or_else(|| anyhow!("backend has no vocabulary to tokenize prompts"))?;
    let prompt = markup.parse(&a.prompt)?;
    let (tokens, resolution) = resolve_anchors(&prompt, vocab)?;
    let mut limits = DecodeLimits::new(a.decode.max_new);
    limits.capture_attention = a.attention;

    if let Some(k) = a.decode.beam {
        let beams = beam_search_anchored(backend.as_ref(), &tokens, &resolution, &config, k, &limits)?;
        if a.json {
            let cands: Vec<_> = beams
                .iter()
                .map(|b| json!({"tokens": b.tokens, "text": vocab.decode(&b.tokens), "score": b.score, "finished": b.finished}))
                .collect();
            emit_json(out, &json!({"prompt_tokens": tokens, "candidates": cands}))?;
        } else {
            for (i, b) in beams.iter().enumerate() {
                writeln!(
                    out,
                    "#{i} score={} finished={} tokens={} text={:?}",
                    b.score,
                    b.finished,
                    join_ids(&b.tokens),
                    vocab.decode(&b.tokens)
                )?;
            }
        }
        return Ok(());
    }

    let trace: GenerationTrace = if config.is_active() {
        anchored_decode_tokens(backend.as_ref(), &tokens, &resolution, &config, &limits)?
    } else {
        greedy_decode(backend.as_ref(), &tokens, &limits)?
    };
    if let Some(path) = &a.trace {
        let mut w = create(path)?;
        trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let generated = trace.tokens();
    let alphas = trace.alphas();
    if a.json {
        emit_json(
            out,
            &json!({
                "prompt_tokens": tokens,
                "anchored_positions": resolution.token_positions,
                "tokens": generated,
                "text": vocab.decode(&generated),
                "finished": trace.finished,
                "steps": trace.steps.len(),
                "score_calls": trace.score_calls,
                "alphas": alphas,
            }),
        )?;
    } else {
        writeln!(out, "tokens: {}", join_ids(&generated))?;
        writeln!(out, "text: {:?}", vocab.decode(&generated))?;
        writeln!(out, "finished: {:?}", trace.finished)?;
        writeln!(out, "steps: {}", trace.steps.len())?;
        writeln!(out, "score_calls: {}", trace.score_calls)?;
    }
    Ok(())
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Parse `START:END:STEP` or `a,b,c`.
pub fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    if let [start, end, step] = s.split(':').collect::<Vec<_>>()[..] {
        let (start, end, step): (f64, f64, f64) = (start.parse()?, end.parse()?, step.parse()?);
        if !(step > 0.0) {
            return Err(anyhow!("grid step must be positive"));
        }
        let n = ((end - start) / step + 1e-9).floor() as i64;
        // Round to 1e-9 so lattice points come out as their decimal values.
        return Ok((0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect());
    }
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(anyhow::Error::from))
        .collect()
}

/// `tent:peak=W[:height=H][:slope=S]`
pub fn parse_tent(s: &str) -> anyhow::Result<Tent> {
    let mut parts = s.split(':');
    if parts.next() != Some("tent") {
        return Err(anyhow!("unknown evaluator {s:?}; expected tent:peak=W"));
    }
    let mut tent = Tent {
        peak: f64::NAN,
        height: 1.0,
        slope: 1.0,
    };
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {kv:?}"))?;
        let v: f64 = v.parse()?;
        match k {
            "peak" => tent.peak = v,
            "height" => tent.height = v,
            "slope" => tent.slope = v,
            other => return Err(anyhow!("unknown tent key {other:?}")),
        }
    }
    if tent.peak.is_nan() {
        return Err(anyhow!("tent evaluator needs peak=W"));
    }
    Ok(tent)
}

/// Pass@1 of always-on anchored decoding over a subset of a corpus.
struct CorpusEvaluator<'a> {
    backend: &'a dyn Backend,
    corpus: &'a [crate::harness::Task],
    opts: EvalOptions,
}

impl Evaluator for CorpusEvaluator<'_> {
    fn pass_at_1(&self, omega: f64, task_ids: &[String]) -> crate::Result<f64> {
        let subset: Vec<_> = self
            .corpus
            .iter()
            .filter(|t| task_ids.contains(&t.id))
            .cloned()
            .collect();
        let mut opts = self.opts.clone();
        opts.config = AnchoringConfig::fixed(omega).with_activation(Activation::Always);
        Ok(evaluate(self.backend, &subset, &opts)?.pass_at_1())
    }
}

fn tune(a: TuneArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let grid = match &a.grid {
        Some(g) => parse_grid(g).map_err(|e| usage(format!("--grid: {e}")))?,
        None => default_grid(),
    };
    let spec = TuneSpec {
        grid,
        folds: a.folds,
        seed,
        early_exit: !a.no_early_exit,
        tune_on_majority: a.tune_on_majority,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = load_corpus(&a.corpus)?;
    let ids: Vec<String> = corpus.iter().map(|t| t.id.clone()).collect();
    let report = match &a.evaluator {
        Some(ev) => grid_search(&parse_tent(ev).map_err(|e| usage(format!("--evaluator: {e}")))?, &ids, &spec)?,
        None => {
            let backend = parse_backend(&a.backend, seed)?;
            let mut opts = EvalOptions::new(AnchoringConfig::off(), DecodeLimits::new(a.max_new));
            opts.timeout_ms = a.timeout_ms;
            opts.workers = a.workers;
            let evaluator = CorpusEvaluator {
                backend: backend.as_ref(),
                corpus: &corpus,
                opts,
            };
            grid_search(&evaluator, &ids, &spec)?
        }
    };
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(anyhow::Error::from)?;
        writeln!(w)?;
        w.flush()?;
    }
    if a.json {
        emit_json(out, &serde_json::to_value(&report).map_err(anyhow::Error::from)?)?;
    } else {
        for f in &report.folds {
            writeln!(out, "fold {}: best_omega={} holdout_pass1={}", f.fold, f.best_omega, f.holdout_pass1)?;
        }
        writeln!(out, "recommended: {}", report.recommended)?;
        writeln!(out, "variance: {}", report.variance)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let config = anchoring_config(&a.anchor)?;
    let markup = markup(&a.anchor)?;
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let corpus = load_corpus(&a.corpus)?;
    let backend = parse_backend(&a.backend, seed)?;
    let mut opts = EvalOptions::new(config, DecodeLimits::new(a.decode.max_new));
    opts.beam_k = a.decode.beam;
    opts.timeout_ms = a.timeout_ms;
    opts.workers = a.workers;
    opts.markup = markup;
    let report = evaluate(backend.as_ref(), &corpus, &opts)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(anyhow::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        let mut csv = create(&path.with_extension("csv"))?;
        report.write_csv(&mut csv)?;
        csv.flush()?;
    }
    if a.json {
        emit_json(out, &serde_json::to_value(&report).map_err(anyhow::Error::from)?)?;
    } else {
        print_eval(&report, out)?;
    }
    Ok(())
}

fn print_eval(report: &EvalReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "tasks: {}", report.tasks.len())?;
    for p in &report.pass_at {
        writeln!(out, "pass@{}: {}", p.k, p.value)?;
    }
    if let Some(b) = report.baseline_pass_at_1 {
        writeln!(out, "baseline pass@1: {b}")?;
    }
    writeln!(out, "anchored attempts: {}", report.anchored_attempts)?;
    for b in &report.buckets {
        writeln!(out, "{:?}: {} tasks, pass@1 {}", b.bucket, b.count, b.pass_at_1)?;
    }
    let errors = report.tasks.iter().filter(|t| t.error.is_some()).count();
    if errors > 0 {
        writeln!(out, "task errors: {errors}")?;
    }
    Ok(())
}

fn output(path: &Option<PathBuf>, out: &mut dyn Write, write: impl FnOnce(&mut dyn Write) -> crate::Result<()>) -> CliResult {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            write(&mut w)?;
            w.flush()?;
        }
        None => write(out)?,
    }
    Ok(())
}

fn analyze(cmd: AnalyzeCommand, seed: u64, out: &mut dyn Write) -> CliResult {
    match cmd {
        AnalyzeCommand::Dilution { trace, out: path } => {
            let file = File::open(&trace).with_context(|| format!("cannot open {}", trace.display()))?;
            let records = read_trace_jsonl(BufReader::new(file), &trace.display().to_string())?;
            let curve = dilution_from_records(&records, 0)?;
            output(&path, out, |w| curve.write_csv(w))
        }
        AnalyzeCommand::Gradients {
            backend,
            tokens,
            prompt,
            out: path,
        } => {
            let backend = parse_backend(&backend, seed)?;
            let ids: Vec<u32> = match (tokens, prompt) {
                (Some(t), _) => t
                    .split(',')
                    .map(|s| s.trim().parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(format!("--tokens: {e}")))?,
                (None, Some(p)) => {
                    let vocab = backend
                        .vocabulary()
                        .ok_or_else(|| anyhow!("backend has no vocabulary"))?;
                    vocab.encode(&Markup::default().parse(&p)?.text())?
                }
                (None, None) => return Err(usage("analyze gradients needs --tokens or --prompt")),
            };
            let scores = gradient_attention(backend.as_ref(), &ids)?;
            output(&path, out, |w| {
                writeln!(w, "position,token,score")?;
                for (i, (t, s)) in ids.iter().zip(&scores).enumerate() {
                    writeln!(w, "{i},{t},{s}")?;
                }
                Ok(())
            })
        }
        AnalyzeCommand::Lengths { report, out: path } => {
            let file = File::open(&report).with_context(|| format!("cannot open {}", report.display()))?;
            let report: EvalReport =
                serde_json::from_reader(BufReader::new(file)).map_err(anyhow::Error::from)?;
            let samples: Vec<LengthSample> = report
                .tasks
                .iter()
                .filter(|t| t.error.is_none())
                .map(|t| LengthSample {
                    tokens: t.generated_tokens,
                    passed: t.passed(),
                    group: t.difficulty.clone().unwrap_or_else(|| "all".into()),
                })
                .collect();
            let stats = length_stats(&samples)?;
            output(&path, out, |w| stats.write_csv(w))
        }
    }
}

fn serve(a: ServeArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let backend: Arc<dyn Backend> = Arc::from(parse_backend(&a.backend, seed)?);
    if a.stdio {
        let stdin = io::stdin();
        wire::serve_stream(backend.as_ref(), stdin.lock(), io::stdout().lock())?;
        return Ok(());
    }
    let handle = wire::serve(backend, a.listen.as_str())?;
    writeln!(out, "listening on {}", handle.local_addr())?;
    out.flush()?;
    handle.wait();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("anchor").chain(args.iter().copied()).map(OsString::from),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn confidence_with_omega_is_usage_error() {
        let (code, _, err) = run_args(&["generate", "--prompt", "⟦ab⟧", "--mode", "confidence", "--omega", "1.5"]);
        assert_eq!(code, 1);
        assert!(err.contains("--mode confidence conflicts with --omega"), "{err}");
    }

    #[test]
    fn lambda_implies_confidence() {
        let (code, out, err) = run_args(&["generate", "--prompt", "a⟦b⟧", "--lambda", "0.5", "--max-new", "3"]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("score_calls"));
    }

    #[test]
    fn version_exits_zero() {
        let (code, out, _) = run_args(&["--version"]);
        assert_eq!(code, 0);
        assert!(out.contains(env!("CARGO_PKG_VERSION")));
    }

    #[test]
    fn bad_backend_is_runtime_error() {
        let (code, _, err) = run_args(&["generate", "--backend", "gpu", "--prompt", "a"]);
        assert_eq!(code, 2);
        assert!(err.contains("unknown backend"));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1.0:2.0:0.05").unwrap(), default_grid());
        assert_eq!(parse_grid("0.5, 1, 1.5").unwrap(), vec![0.5, 1.0, 1.5]);
        assert!(parse_grid("1:2:0").is_err());
    }

    #[test]
    fn backend_spec_parsing() {
        let b = parse_backend("toy:seed=3:vocab=24:dim=8:layers=1:heads=2:ctx=64", 0).unwrap();
        assert_eq!(b.meta().vocab_size, 24);
        assert_eq!(b.meta().max_positions, 64);
        assert!(parse_backend("toy:vocab", 0).is_err());
        assert!(parse_backend("toy:colour=3", 0).is_err());
        assert!(parse_backend("remote:", 0).is_err());
    }
}
