//! `putri`: build toy models, prune them, evaluate perplexity and run
//! ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
//! (unreadable inputs, infeasible targets, failed runs).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use putri_core::data::{load_corpus, load_token_stream, windows_from_stream, CorpusOptions};
use putri_core::eval::perplexity;
use putri_core::model::{load, save, train_toy, TrainConfig};
use putri_core::pruning::{ablation_csv, putri, run_ablation, PruneReport};
use putri_core::{CalibrationSet, Error, ModelConfig, PruneConfig, ToyTransformer};

#[derive(Parser, Debug)]
#[command(name = "putri", version, about = "Structured pruning for small GQA transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a model from a preset or config file, optionally train it.
    MakeToy(MakeToyArgs),
    /// Prune a model to a target sparsity.
    Prune(PruneArgs),
    /// Print corpus perplexity of a model.
    EvalPpl(EvalArgs),
    /// Run every ablation variant over sparsities and seeds into a CSV.
    Ablate(AblateArgs),
    /// Show a model's layout, parameter counts and digest.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct MakeToyArgs {
    /// Preset name (`tiny`, `uniform`) or path to a JSON model config.
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    /// Training text or `.tok` file; required when training.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lr: f32,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    train_seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CalibArgs {
    /// Calibration corpus (text or `.tok`).
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    n_seqs: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Held-out corpus for perplexity; defaults to the calibration file.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    eval_seq_len: Option<usize>,
    #[arg(long)]
    eval_n_seqs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    eval_seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PruneFlags {
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    p_min: usize,
    /// Grouped heads removed per round; defaults to the KV head count.
    #[arg(long)]
    heads_per_iteration: Option<usize>,
    #[arg(long, default_value_t = 1)]
    score_sequences: usize,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long)]
    no_ffn_update: bool,
    #[arg(long)]
    parallel_update: bool,
    #[arg(long)]
    full_attention: bool,
}

impl PruneFlags {
    fn config(&self, sparsity: f64) -> PruneConfig {
        PruneConfig {
            target_sparsity: sparsity,
            alpha: self.alpha,
            p_min: self.p_min,
            heads_per_iteration: self.heads_per_iteration,
            score_sequences: self.score_sequences,
            ridge: self.ridge,
            no_ffn_update: self.no_ffn_update,
            parallel_update: self.parallel_update,
            full_attention: self.full_attention,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sparsity: f64,
    #[command(flatten)]
    data: CalibArgs,
    #[command(flatten)]
    flags: PruneFlags,
    #[arg(long)]
    out: PathBuf,
    /// Canonical JSON report; written even when pruning fails.
    #[arg(long)]
    report: PathBuf,
    /// Append a one-row CSV summary (with header) to this file.
    #[arg(long)]
    summary_csv: Option<PathBuf>,
    /// Store elapsed seconds in the report (makes it non-reproducible).
    #[arg(long)]
    record_wall_clock: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    n_seqs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    sparsities: Vec<f64>,
    /// Calibration sampling seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: CalibArgs,
    #[command(flatten)]
    flags: PruneFlags,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn log_config<T: Serialize>(name: &str, args: &T) {
    let json = serde_json::to_string(args).expect("args serialize");
    eprintln!("putri {name}: {json}");
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn resolve_model_config(spec: &str) -> CliResult<(ModelConfig, bool)> {
    match spec {
        "tiny" => Ok((ModelConfig::tiny(), false)),
        "uniform" => Ok((ModelConfig::tiny(), true)),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("unknown preset or unreadable config {path:?}: {e}")))?;
            let config: ModelConfig =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad model config {path}: {e}")))?;
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((config, false))
        }
    }
}

fn make_toy(args: &MakeToyArgs) -> CliResult<()> {
    log_config("make-toy", args);
    let (config, uniform) = resolve_model_config(&args.config)?;
    let mut model = ToyTransformer::init_random(&config, args.seed)?;
    if args.train_steps > 0 {
        let corpus = args
            .corpus
            .as_ref()
            .ok_or_else(|| CliError::Usage("--train-steps needs --corpus".into()))?;
        let (stream, _) = load_token_stream(corpus, config.vocab_size)?;
        let cfg = TrainConfig {
            steps: args.train_steps,
            lr: args.lr,
            seed: args.seed,
            batch_size: args.batch_size,
            seq_len: args.train_seq_len,
        };
        let outcome = train_toy(&model, &stream, &cfg)?;
        eprintln!("training loss {:.6} -> {:.6}", outcome.initial_loss, outcome.final_loss);
        model = outcome.model;
    }
    if uniform {
        // Zero LM head: every position predicts the uniform distribution.
        model.lm_head.data_mut().fill(0.0);
    }
    save(&model, &args.out)?;
    let p = model.param_counts();
    println!("F={} A={} digest={}", p.ffn, p.attn, model.digest());
    Ok(())
}

fn load_sets(d: &CalibArgs, vocab: usize) -> CliResult<(CalibrationSet, CalibrationSet)> {
    let calib_opts = CorpusOptions { seq_len: d.seq_len, n_sequences: d.n_seqs, seed: d.data_seed, vocab_size: vocab, ..CorpusOptions::default() };
    let calib = load_corpus(&d.calib, &calib_opts)?;
    let eval = load_corpus(d.eval.as_ref().unwrap_or(&d.calib), &eval_options(d, vocab))?;
    Ok((calib, eval))
}

fn eval_options(d: &CalibArgs, vocab: usize) -> CorpusOptions {
    CorpusOptions {
        seq_len: d.eval_seq_len.unwrap_or(d.seq_len),
        n_sequences: d.eval_n_seqs.unwrap_or(d.n_seqs),
        seed: d.eval_seed,
        vocab_size: vocab,
        ..CorpusOptions::default()
    }
}

fn check_data_args(d: &CalibArgs) -> CliResult<()> {
    if d.seq_len < 2 || d.eval_seq_len.is_some_and(|l| l < 2) {
        return Err(CliError::Usage("sequence length must be >= 2".into()));
    }
    if d.n_seqs == 0 || d.eval_n_seqs == Some(0) {
        return Err(CliError::Usage("need at least one sequence".into()));
    }
    Ok(())
}

fn prune(args: &PruneArgs) -> CliResult<()> {
    log_config("prune", args);
    let cfg = args.flags.config(args.sparsity);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    check_data_args(&args.data)?;
    let model = load(&args.model)?;
    let (calib, eval) = load_sets(&args.data, model.config.vocab_size)?;
    let start = Instant::now();
    let result = putri(&model, &calib, &eval, &cfg);
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!("elapsed {elapsed:.3}s");
    let (report, failure) = match result {
        Ok((pruned, mut report)) => {
            save(&pruned, &args.out)?;
            if args.record_wall_clock {
                report.wall_clock_seconds = Some(elapsed);
            }
            (report, None)
        }
        Err(e) => {
            let mut report = PruneReport::failed(&model, &cfg, &calib, &eval, &e);
            if args.record_wall_clock {
                report.wall_clock_seconds = Some(elapsed);
            }
            (report, Some(e))
        }
    };
    write_file(&args.report, report.to_canonical_json())?;
    if let Some(path) = &args.summary_csv {
        let line = format!("{}\n{}\n", putri_core::pruning::SUMMARY_CSV_HEADER, report.csv_row());
        write_file(path, line)?;
    }
    println!("{}", report.summary_line());
    match failure {
        None => Ok(()),
        Some(e) => Err(CliError::Runtime(e.to_string())),
    }
}

fn eval_ppl(args: &EvalArgs) -> CliResult<()> {
    log_config("eval-ppl", args);
    if args.seq_len < 2 || args.n_seqs == 0 {
        return Err(CliError::Usage("need --seq-len >= 2 and --n-seqs >= 1".into()));
    }
    let model = load(&args.model)?;
    let opts = CorpusOptions {
        seq_len: args.seq_len,
        n_sequences: args.n_seqs,
        seed: args.seed,
        vocab_size: model.config.vocab_size,
        ..CorpusOptions::default()
    };
    let data = load_corpus(&args.data, &opts)?;
    let result = perplexity(&model, &data.sequences)?;
    eprintln!("scored {} tokens", result.token_count);
    println!("{}", result.value);
    Ok(())
}

fn ablate(args: &AblateArgs) -> CliResult<()> {
    log_config("ablate", args);
    for &s in &args.sparsities {
        args.flags.config(s).validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    check_data_args(&args.data)?;
    let model = load(&args.model)?;
    let vocab = model.config.vocab_size;
    let d = &args.data;
    let (stream, digest) = load_token_stream(&d.calib, vocab)?;
    let eval = load_corpus(d.eval.as_ref().unwrap_or(&d.calib), &eval_options(d, vocab))?;
    let calib_for_seed = |seed: u64| {
        let opts = CorpusOptions { seq_len: d.seq_len, n_sequences: d.n_seqs, seed, vocab_size: vocab, ..CorpusOptions::default() };
        windows_from_stream(&stream, &opts, digest.clone())
    };
    let rows = run_ablation(&model, calib_for_seed, &eval, &args.flags.config(0.0), &args.sparsities, &args.seeds)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} s={} seed={}: {}", r.variant.name(), r.sparsity, r.seed, r.error.as_deref().unwrap_or(""));
    }
    let csv = ablation_csv(&rows);
    write_file(&args.out_csv, &csv)?;
    print!("{csv}");
    if rows.iter().any(|r| r.ppl.is_some()) {
        Ok(())
    } else {
        Err(CliError::Runtime("every ablation run failed".into()))
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct LayerInfo {
    layer: usize,
    kv_live: usize,
    ff_live: usize,
    kv_heads: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct InspectInfo {
    config: ModelConfig,
    digest: String,
    ffn_params: u64,
    attn_params: u64,
    layers: Vec<LayerInfo>,
}

fn inspect(args: &InspectArgs) -> CliResult<()> {
    log_config("inspect", args);
    let model = load(&args.model)?;
    let p = model.param_counts();
    let info = InspectInfo {
        config: model.config.clone(),
        digest: model.digest(),
        ffn_params: p.ffn,
        attn_params: p.attn,
        layers: model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerInfo { layer: i, kv_live: l.kv_live(), ff_live: l.ff_live(), kv_heads: l.kv_heads.clone() })
            .collect(),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&info).expect("info serializes"));
        return Ok(());
    }
    let c = &info.config;
    println!(
        "d_model={} layers={} q_heads={} kv_heads={} head_dim={} d_ff={} vocab={} ffn={:?}",
        c.d_model, c.n_layers, c.n_q_heads, c.n_kv_heads, c.head_dim, c.d_ff, c.vocab_size, c.ffn_kind
    );
    println!("{:>5} {:>7} {:>7}  kv_heads", "layer", "kv_live", "ff_live");
    for l in &info.layers {
        println!("{:>5} {:>7} {:>7}  {:?}", l.layer, l.kv_live, l.ff_live, l.kv_heads);
    }
    println!("F={} A={} total={}", info.ffn_params, info.attn_params, info.ffn_params + info.attn_params);
    println!("digest {}", info.digest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::MakeToy(a) => make_toy(a),
        Command::Prune(a) => prune(a),
        Command::EvalPpl(a) => eval_ppl(a),
        Command::Ablate(a) => ablate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
