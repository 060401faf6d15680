//! `catmt`: harvest, encode, split, analyze, train, translate and evaluate
//! English to Vietnamese category-name translation.

use std::fs;
use std::io::{self, BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use catmt_core::corpus::{self, Dataset, Side, SplitSpec, DEFAULT_SPLIT_SEED};
use catmt_core::harvester::{
    self, FixtureTransport, HarvestConfig, HarvestStatus, HttpTransport, SystemClock, Transport,
    USER_AGENT_ENV,
};
use catmt_core::inference::{DecodeConfig, Strategy, Translator};
use catmt_core::metrics;
use catmt_core::model::ModelConfig;
use catmt_core::tokenizer::{Vocab, MAX_CONTENT_LEN};
use catmt_core::trainer::{self, Checkpoint, TrainConfig};
use catmt_core::vicodec::{CodecWarning, DiacriticTable};

#[derive(Parser, Debug)]
#[command(name = "catmt", version, about = "Translate Wikipedia category names from English to Vietnamese")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
enum Command {
    /// Collect category pairs from Wikidata (or a fixture directory)
    Harvest(HarvestArgs),
    /// Replace Vietnamese diacritic letters with @<index> tokens
    Encode(CodecArgs),
    /// Turn @<index> tokens back into Vietnamese letters
    Decode(CodecArgs),
    /// Print the diacritic table
    Table,
    /// Shuffle a dataset and cut it into train/valid/test files
    Split(SplitArgs),
    /// Print corpus statistics
    Analyze(AnalyzeArgs),
    /// Write one side of a dataset as plain text, one line per pair
    Export(ExportArgs),
    /// Train a model and write the best checkpoint
    Train(TrainArgs),
    /// Translate English lines with a checkpoint
    Translate(TranslateArgs),
    /// Score hypothesis lines against reference lines
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Serialize)]
struct HarvestArgs {
    /// Output dataset (JSONL); an existing file is resumed
    #[arg(long, short)]
    out: PathBuf,
    /// Query the live Wikidata API
    #[arg(long, conflicts_with = "fixtures", required_unless_present = "fixtures")]
    live: bool,
    /// Directory of Q<n>.json entity fixtures to serve instead of the API
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 15_000)]
    target_count: usize,
    #[arg(long, default_value_t = harvester::DEFAULT_MAX_QID)]
    max_qid: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Minimum spacing between requests, in milliseconds
    #[arg(long, default_value_t = 500)]
    interval_ms: u64,
    /// Base of the exponential retry backoff, in milliseconds
    #[arg(long, default_value_t = 2000)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ids per request (at most 50)
    #[arg(long, default_value_t = harvester::MAX_BATCH)]
    batch_size: usize,
    /// Maximum number of id batches to request
    #[arg(long, default_value_t = 100_000)]
    budget: usize,
    /// Visited-id file used to resume (defaults to <out>.visited)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = USER_AGENT_ENV, default_value = "")]
    user_agent: String,
}

#[derive(Args, Debug, Serialize)]
struct CodecArgs {
    /// Input file (standard input when omitted)
    input: Option<PathBuf>,
    /// Output file (standard output when omitted)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Directory receiving train.jsonl, valid.jsonl and test.jsonl
    #[arg(long)]
    out_dir: PathBuf,
    /// Weights (8:1:1) or fractions summing to 1 (0.8:0.1:0.1)
    #[arg(long, default_value = "8:1:1")]
    ratios: String,
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Number of popular and rare words to list
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ExportSide {
    Source,
    Target,
    Encoded,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum)]
    side: ExportSide,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// d_model 128, 4 heads, 2+2 layers
    Desk,
    /// d_model 8, 2 heads, 1+1 layers, no dropout
    Tiny,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training split (JSONL)
    #[arg(long)]
    train: PathBuf,
    /// Validation split (JSONL)
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = MAX_CONTENT_LEN)]
    max_source_length: usize,
    #[arg(long, default_value_t = 400)]
    warmup: u64,
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Case-fold both vocabularies
    #[arg(long)]
    lowercase: bool,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct TranslateArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    /// English lines (standard input when omitted)
    #[arg(long, short)]
    input: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 4)]
    beam_size: usize,
    /// Length-normalization exponent for beam ranking
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = MAX_CONTENT_LEN)]
    max_len: usize,
    /// Emit @<index> encoded text instead of Vietnamese letters
    #[arg(long)]
    encoded: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Greedy,
    Beam,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match serde_json::to_string(&cli.command) {
        Ok(cfg) => eprintln!("effective configuration: {cfg}"),
        Err(e) => log::warn!("could not print configuration: {e}"),
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

/// Joins the error chain, skipping causes already spelled out by an outer message.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Harvest(a) => harvest(a),
        Command::Encode(a) => codec(a, true),
        Command::Decode(a) => codec(a, false),
        Command::Table => {
            print!("{}", DiacriticTable::canonical().to_tsv());
            Ok(())
        }
        Command::Split(a) => split(a),
        Command::Analyze(a) => analyze(a),
        Command::Export(a) => export(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading standard input")?;
            Ok(s)
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn harvest(a: HarvestArgs) -> Result<()> {
    let transport: Box<dyn Transport> = if a.live {
        Box::new(HttpTransport::new(&a.user_agent)?)
    } else {
        let dir = a.fixtures.as_ref().expect("clap requires --live or --fixtures");
        Box::new(FixtureTransport::from_dir(dir)?)
    };
    let sink = if a.out.exists() {
        Dataset::load(&a.out)?
    } else {
        Dataset::new()
    };
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".visited");
        PathBuf::from(p)
    });
    let config = HarvestConfig {
        target_count: a.target_count,
        max_qid: a.max_qid,
        concurrency: a.concurrency,
        min_request_interval: Duration::from_millis(a.interval_ms),
        backoff_base: Duration::from_millis(a.backoff_ms),
        user_agent: a.user_agent,
        seed: a.seed,
        batch_size: a.batch_size,
        attempt_budget: a.budget,
        checkpoint: Some(checkpoint),
        output: Some(a.out.clone()),
        ..HarvestConfig::default()
    };
    let out = harvester::harvest(&config, transport.as_ref(), Arc::new(SystemClock::new()), sink)?;
    out.dataset.save(&a.out)?;
    match out.status {
        HarvestStatus::Complete => println!(
            "collected {} pairs ({} batches, {} requests) into {}",
            out.dataset.len(),
            out.batches,
            out.requests,
            a.out.display()
        ),
        HarvestStatus::Shortfall { missing } => println!(
            "shortfall: {} pairs collected, {missing} short of the target after {} batches ({} requests)",
            out.dataset.len(),
            out.batches,
            out.requests
        ),
    }
    Ok(())
}

fn codec(a: CodecArgs, encode: bool) -> Result<()> {
    let text = read_input(a.input.as_deref())?;
    let table = DiacriticTable::canonical();
    let (out, warnings) = if encode {
        let e = table.encode(&text);
        (e.text, e.warnings)
    } else {
        let d = table.decode(&text);
        (d.text, d.warnings)
    };
    for w in warnings.iter().take(20) {
        match w {
            CodecWarning::OutOfAlphabet { position, ch } => {
                log::warn!("character {ch:?} at {position} is not in the table; kept as is")
            }
            CodecWarning::UnresolvedEscape { position } => {
                log::warn!("'@' at {position} does not start a valid index; kept as is")
            }
        }
    }
    if warnings.len() > 20 {
        log::warn!("{} more warnings", warnings.len() - 20);
    }
    let mut w = open_output(a.output.as_deref())?;
    w.write_all(out.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = Dataset::load(&a.input)?;
    let spec = SplitSpec::parse(&a.ratios, a.seed)?;
    let parts = corpus::split(&ds, &spec)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, part) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        part.save(&path)?;
        println!("{name}: {} pairs -> {}", part.len(), path.display());
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ds = Dataset::load(&a.input)?;
    let stats = corpus::analyze(&ds, a.top)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{stats}");
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ds = Dataset::load(&a.input)?;
    let mut w = open_output(a.output.as_deref())?;
    for p in &ds {
        let text = match a.side {
            ExportSide::Source => &p.source,
            ExportSide::Target => &p.target,
            ExportSide::Encoded => &p.encoded_target,
        };
        writeln!(w, "{text}")?;
    }
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let train_ds = Dataset::load(&a.train)?;
    if train_ds.is_empty() {
        bail!("training file {} holds no pairs", a.train.display());
    }
    let valid_ds = match &a.valid {
        Some(p) => Dataset::load(p)?,
        None => Dataset::new(),
    };
    let case_sensitive = !a.lowercase;
    let src = Vocab::build(&train_ds, Side::Source, case_sensitive, a.min_count);
    let tgt = Vocab::build(&train_ds, Side::Target, case_sensitive, a.min_count);

    let mut mc = match a.preset {
        Preset::Desk => ModelConfig::new(src.len(), tgt.len()),
        Preset::Tiny => ModelConfig::tiny(src.len(), tgt.len()),
    };
    let overrides = [
        (a.d_model, &mut mc.d_model),
        (a.heads, &mut mc.heads),
        (a.d_k, &mut mc.d_k),
        (a.d_v, &mut mc.d_v),
        (a.d_ff, &mut mc.d_ff),
        (a.enc_layers, &mut mc.enc_layers),
        (a.dec_layers, &mut mc.dec_layers),
    ];
    for (value, slot) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(d) = a.dropout {
        mc.dropout = d;
    }
    mc.max_len = a.max_source_length;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        max_source_length: a.max_source_length,
        warmup_steps: a.warmup,
        lr_scale: a.lr_scale,
        seed: a.seed,
        checkpoint_path: Some(a.out.clone()),
    };
    eprintln!("model configuration: {}", serde_json::to_string(&mc)?);
    eprintln!("training configuration: {}", serde_json::to_string(&tc)?);

    let train_ex = trainer::examples(&train_ds, &src, &tgt, a.max_source_length);
    let valid_ex = trainer::examples(&valid_ds, &src, &tgt, a.max_source_length);
    let started = Instant::now();
    let out = trainer::train(&mc, &tc, &train_ex, &valid_ex, &src, &tgt)?;
    // rewrite so the stored history covers every epoch
    out.best.save(&a.out)?;
    for r in &out.history {
        let valid = r.valid_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("epoch {:>4}  steps {:>6}  train {:.4}  valid {valid}", r.epoch, r.steps, r.train_loss);
    }
    println!(
        "best checkpoint (epoch {}) written to {} in {:.1}s",
        out.best.meta.epoch,
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let decode = DecodeConfig {
        strategy: match a.strategy {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Beam => Strategy::Beam,
        },
        beam_size: a.beam_size,
        max_len: a.max_len,
        length_norm_alpha: a.alpha,
    };
    let translator = Translator::from_checkpoint(&ck, decode)?;
    let mut w = open_output(a.output.as_deref())?;
    let lines: Box<dyn Iterator<Item = io::Result<String>>> = match &a.input {
        Some(p) => Box::new(
            io::BufReader::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)
                .lines(),
        ),
        None => Box::new(io::stdin().lock().lines()),
    };
    for line in lines {
        let line = line.context("reading input")?;
        let out = if a.encoded {
            translator.translate_encoded(&line)?
        } else {
            translator.translate(&line)?
        };
        writeln!(w, "{out}")?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = metrics::evaluate(&a.hyp, &a.reference, a.lowercase)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("{report}");
    }
    Ok(())
}
