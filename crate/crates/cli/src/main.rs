use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gtrans::checkpoint::load_checkpoint;
use gtrans::data::{encode_pairs, gen_synthetic, make_batches, read_tsv_lines, write_tsv, Task, Vocabulary, EOS};
use gtrans::eval::{bleu4, gradient_norm_report, write_gradient_csv};
use gtrans::experiment::{load_dataset, run_training, RunConfig};
use gtrans::inference::{apply_prune, default_max_len, translate, GroupRange, PruneSpec};
use gtrans::{CheckpointError, Error, NormStyle};

#[derive(Parser)]
#[command(name = "gtrans", version, about = "Group-fused Transformer: data generation, training, translation, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel corpus as TSV.
    GenData(GenDataArgs),
    /// Train a model from a run config and a TSV corpus.
    Train(TrainArgs),
    /// Translate one sentence per line.
    Translate(TranslateArgs),
    /// Corpus BLEU-4 of hypotheses against references, as JSON.
    EvalBleu(EvalArgs),
    /// Per-layer gradient norms of a checkpoint on a corpus, as CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// copy, reverse or sort
    task: String,
    /// Vocabulary size including the four reserved tokens.
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Number of sentence pairs.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; unknown keys are rejected. Flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training TSV (overrides data.train).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation TSV (overrides data.valid).
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory for checkpoints, metrics.jsonl, weights.csv, gradients.csv.
    #[arg(long)]
    out: PathBuf,
    /// Encoder layers [default: 6]
    #[arg(long)]
    enc_layers: Option<usize>,
    /// Decoder layers [default: 6]
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Encoder layers per group, T_e [default: 3]
    #[arg(long)]
    enc_group_size: Option<usize>,
    /// Decoder layers per group, T_d [default: 2]
    #[arg(long)]
    dec_group_size: Option<usize>,
    /// Model width [default: 512]
    #[arg(long)]
    d_model: Option<usize>,
    /// Feed-forward inner width [default: 1024]
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Attention heads [default: 8]
    #[arg(long)]
    heads: Option<usize>,
    /// Dropout rate [default: 0.3]
    #[arg(long)]
    dropout: Option<f64>,
    /// post or pre [default: post]
    #[arg(long)]
    norm_style: Option<NormStyle>,
    /// Train a plain Transformer without layer-group fusion [default: fusion on]
    #[arg(long)]
    no_fusion: bool,
    /// Epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Padded target tokens per batch [default: 4096]
    #[arg(long)]
    batch_tokens: Option<usize>,
    /// Warmup steps [default: 4000]
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Learning-rate multiplier [default: 1.0]
    #[arg(long)]
    lr_factor: Option<f64>,
    /// Label smoothing [default: 0.1]
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Gradient-norm clip, 0 disables [default: 1.0]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Seed for initialization, batching and dropout [default: 1]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Beam width; 1 is greedy.
    #[arg(long, default_value_t = 8)]
    beam: usize,
    /// Run only the bottom K encoder layers (a multiple of T_e) [default: all]
    #[arg(long)]
    encoder_keep: Option<usize>,
    /// Mix only decoder groups a..=b, written a:b [default: all groups]
    #[arg(long)]
    decoder_groups: Option<String>,
    /// Maximum output length [default: 2 x source + 10]
    #[arg(long)]
    max_len: Option<usize>,
    /// Length-normalization exponent
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// TSV corpus to probe.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    /// Number of batches to probe; one CSV row each.
    #[arg(long, default_value_t = 10)]
    batches: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) | Error::Vocab { .. } | Error::EmptyBatch => 3,
        Error::Diverged(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate_cmd(a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged(report) = &e {
                if let Ok(json) = serde_json::to_string_pretty(report) {
                    eprintln!("{json}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenDataArgs) -> gtrans::Result<()> {
    let task: Task = a.task.parse().map_err(Error::Usage)?;
    let pairs = gen_synthetic(task, a.vocab, a.min_len, a.max_len, a.n, a.seed)?;
    write_tsv(&a.out, &pairs, &Vocabulary::numeric(a.vocab))?;
    eprintln!("wrote {} {task} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> gtrans::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let m = &mut cfg.model;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(m.enc_layers, a.enc_layers);
    set!(m.dec_layers, a.dec_layers);
    set!(m.enc_group_size, a.enc_group_size);
    set!(m.dec_group_size, a.dec_group_size);
    set!(m.d_model, a.d_model);
    set!(m.ffn_dim, a.ffn_dim);
    set!(m.heads, a.heads);
    set!(m.dropout, a.dropout);
    set!(m.norm_style, a.norm_style);
    if a.no_fusion {
        m.fusion = false;
    }
    let t = &mut cfg.train;
    set!(t.epochs, a.epochs);
    set!(t.batch_tokens, a.batch_tokens);
    set!(t.warmup_steps, a.warmup_steps);
    set!(t.lr_factor, a.lr_factor);
    set!(t.label_smoothing, a.label_smoothing);
    set!(t.clip_norm, a.clip_norm);
    set!(t.seed, a.seed);
    if a.data.is_some() {
        cfg.data.train = a.data.clone();
    }
    if a.valid.is_some() {
        cfg.data.valid = a.valid.clone();
    }

    // reject bad configs before reading any data
    let mut probe = cfg.model.clone();
    for v in [&mut probe.src_vocab, &mut probe.tgt_vocab] {
        if *v == 0 {
            *v = 5;
        }
    }
    let mut errs = Vec::new();
    for r in [probe.validate(), cfg.train.validate()] {
        if let Err(Error::Config(e)) = r {
            errs.extend(e);
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let data = load_dataset(&cfg.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    eprintln!(
        "training on {} pairs, validating on {}, vocabulary {}",
        data.train.len(),
        data.valid.len(),
        data.vocab.len()
    );
    let outcome = run_training(&cfg.model, &cfg.train, &data, Some(&a.out))?;
    for m in &outcome.metrics {
        eprintln!(
            "epoch {:>3}  train {:.4}  valid {:.4}  acc {:.4}",
            m.epoch, m.train_loss, m.valid_loss, m.valid_token_acc
        );
    }
    match outcome.diverged {
        Some(d) => Err(Error::Diverged(Box::new(d))),
        None => Ok(()),
    }
}

fn translate_cmd(a: TranslateArgs) -> gtrans::Result<()> {
    let decoder_groups = a.decoder_groups.as_deref().map(str::parse::<GroupRange>).transpose()?;
    if a.beam == 0 {
        return Err(Error::Usage("--beam must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    let vocab = ck
        .vocab
        .as_ref()
        .ok_or_else(|| CheckpointError::Incompatible("checkpoint has no vocabulary".into()))?;
    let spec = PruneSpec {
        encoder_keep: a.encoder_keep,
        decoder_groups,
    };
    let model = apply_prune(&ck.model, spec).map_err(|e| match e {
        Error::Parameter(msg) => Error::Usage(msg),
        other => other,
    })?;
    let text = fs::read_to_string(&a.input)?;
    let limit = ck.model.config().max_len;
    let sources: Vec<Vec<u32>> = text
        .lines()
        .map(|line| {
            let mut ids = vocab.encode(line);
            ids.truncate(limit - 1);
            ids.push(EOS);
            ids
        })
        .collect();
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (line, src) in text.lines().zip(&sources) {
        if line.trim().is_empty() {
            writeln!(out)?;
            continue;
        }
        let max_len = a.max_len.unwrap_or_else(|| default_max_len(&ck.model, src.len()));
        let hyp = translate(&model, std::slice::from_ref(src), a.beam, max_len, a.length_penalty)?;
        writeln!(out, "{}", vocab.decode(hyp[0].content()))?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> gtrans::Result<Vec<Vec<String>>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

fn eval_bleu(a: EvalArgs) -> gtrans::Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            a.hyp.display(),
            hyps.len(),
            a.reference.display(),
            refs.len()
        )));
    }
    let report = bleu4(&hyps, &refs)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> gtrans::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let vocab = ck
        .vocab
        .as_ref()
        .ok_or_else(|| CheckpointError::Incompatible("checkpoint has no vocabulary".into()))?;
    let mut model = ck.model.clone();
    let lines = read_tsv_lines(&a.data)?;
    let (pairs, _) = encode_pairs(&lines, vocab, model.config().max_len);
    let batches = make_batches(&pairs, a.batch_tokens, ck.state.seed)?;
    let reports = batches
        .iter()
        .take(a.batches)
        .enumerate()
        .map(|(i, b)| gradient_norm_report(&mut model, b, &[], i as u64))
        .collect::<gtrans::Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => write_gradient_csv(fs::File::create(p)?, &reports)?,
        None => write_gradient_csv(std::io::stdout().lock(), &reports)?,
    }
    Ok(())
}
