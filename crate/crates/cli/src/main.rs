mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use o2r::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use o2r::corpus::{
    build_vocabulary, derive_outlines, parse_records, read_pairs, read_records, token_counts, tokenize, Vocabulary,
};
use o2r::generation::{
    bleu, corpus_bleu, generate, repetition_rate, GenerationRecord, Strategy,
};
use o2r::gradcheck::{run_gradcheck, EPSILON, TOLERANCE};
use o2r::harness::{comparison_config, run_comparison};
use o2r::synthetic::hierarchical_corpus;
use o2r::training::{evaluate_loss, EpochReport, TrainEvent, TrainingState};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "o2r", version, about = "Outline-then-report text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Run configuration file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a JSON-lines dataset.
    BuildVocab {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset (`data.train`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output vocabulary file (`data.vocab`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        min_freq: Option<usize>,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Train and write checkpoints plus a per-epoch loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after this many epochs in total (`train.max_epochs`).
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from a checkpoint; its stored configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep outline decoder parameters fixed (`train.freeze_outline`).
        #[arg(long)]
        freeze_outline: bool,
        /// Output directory (`output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate outlines and reports.
    Generate(GenerateArgs),
    /// Score generated reports against references.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Finite-difference check of every parameter block on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the two-stage model and a zero-outline-weight baseline on synthetic data.
    Compare {
        #[arg(long, default_value_t = 240)]
        pairs: usize,
        #[arg(long, default_value_t = 60)]
        epochs: u64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (`data.vocab`); must match the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSON-lines input; only `id` and `news` are read.
    #[arg(long, conflicts_with = "news")]
    input: Option<PathBuf>,
    /// A single news text.
    #[arg(long)]
    news: Option<String>,
    #[arg(long, conflicts_with_all = ["beam", "sample"])]
    greedy: bool,
    /// Beam search with this width.
    #[arg(long, conflicts_with = "sample")]
    beam: Option<usize>,
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw the latent from the prior instead of using its mean.
    #[arg(long)]
    sample_latent: bool,
    /// Include outline attention weights in the output.
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    max_report_len: Option<usize>,
    #[arg(long)]
    max_outline_len: Option<usize>,
    /// Output file; standard output if omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab {
            cfg,
            data,
            out,
            min_freq,
            max_size,
        } => cmd_build_vocab(cfg, data, out, min_freq, max_size),
        Command::Train {
            cfg,
            epochs,
            resume,
            freeze_outline,
            out,
        } => cmd_train(cfg, epochs, resume, freeze_outline, out),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate { generated, reference } => cmd_evaluate(&generated, &reference),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Compare { pairs, epochs, seed } => cmd_compare(pairs, epochs, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_build_vocab(
    args: ConfigArgs,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    min_freq: Option<usize>,
    max_size: Option<usize>,
) -> Result<()> {
    let mut cfg = args.load()?;
    cfg.train_data = data.or(cfg.train_data);
    cfg.vocab = out.or(cfg.vocab);
    cfg.min_freq = min_freq.unwrap_or(cfg.min_freq);
    cfg.max_size = max_size.unwrap_or(cfg.max_size);
    let data = cfg.require_train_data()?;
    let pairs = read_pairs(data).with_context(|| format!("reading {}", data.display()))?;
    let vocab = build_vocabulary(&pairs, cfg.min_freq, cfg.max_size)?;
    let out = cfg.require_vocab()?;
    vocab.save(out)?;
    let counts = token_counts(&pairs);
    let total: usize = counts.values().sum();
    let oov: usize = counts
        .iter()
        .filter(|(t, _)| !vocab.contains(t))
        .map(|(_, c)| c)
        .sum();
    let oov_types = counts.keys().filter(|t| !vocab.contains(t)).count();
    println!("vocabulary size: {}", vocab.len());
    println!(
        "out-of-vocabulary: {oov} of {total} tokens ({:.2}%), {oov_types} of {} types",
        100.0 * oov as f64 / total.max(1) as f64,
        counts.len()
    );
    Ok(())
}

fn csv_line(r: &EpochReport) -> String {
    format!("{},{},{},{},{}", r.epoch, r.step, r.outline, r.report, r.model)
}

const CSV_HEADER: &str = "epoch,step,L_outline,L_report,L_model";

fn cmd_train(
    args: ConfigArgs,
    epochs: Option<u64>,
    resume: Option<PathBuf>,
    freeze_outline: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = args.load()?;
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    if freeze_outline {
        cfg.train.freeze_outline = true;
    }
    cfg.output_dir = out.or(cfg.output_dir);
    cfg.validate()?;
    let vocab_path = cfg.require_vocab()?;
    let vocab = Vocabulary::load(vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    let data = cfg.require_train_data()?;
    let mut pairs = read_pairs(data).with_context(|| format!("reading {}", data.display()))?;
    let out_dir = cfg.require_output_dir()?.to_path_buf();
    fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("loss.csv");

    let (mut state, mut log) = match &resume {
        Some(path) => {
            let (mut state, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            check_fingerprint(&meta, &vocab)?;
            state.config.max_epochs = cfg.train.max_epochs;
            if freeze_outline {
                state.config.freeze_outline = true;
            }
            let log = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)?;
            (state, log)
        }
        None => {
            let state = TrainingState::new(cfg.train.clone(), vocab.len())?;
            let log = fs::File::create(&log_path)?;
            (state, log)
        }
    };
    derive_outlines(&mut pairs, state.config.outline_k);
    let meta = CheckpointMeta {
        vocab_fingerprint: Some(vocab.fingerprint()),
        longest_report: pairs.iter().map(|p| p.report.len()).max().unwrap_or(0),
        longest_outline: pairs
            .iter()
            .filter_map(|p| p.outline.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0),
    };
    let emit = |log: &mut fs::File, line: &str| -> Result<()> {
        writeln!(log, "{line}")?;
        println!("{line}");
        Ok(())
    };
    if resume.is_none() {
        let initial = evaluate_loss(
            &state.params,
            &pairs,
            &vocab,
            state.config.caps,
            state.kl_weight(),
            state.config.outline_weight,
        )?;
        emit(&mut log, CSV_HEADER)?;
        emit(&mut log, &csv_line(&initial))?;
        save_checkpoint(&out_dir.join(epoch_file(0)), &state, &meta)?;
        save_checkpoint(&out_dir.join("last.bin"), &state, &meta)?;
    }
    let target = state.config.max_epochs;
    while state.epoch < target {
        let mut report = None;
        state.train(&pairs, &vocab, state.epoch + 1, None, &mut |e| {
            if let TrainEvent::Epoch(r) = e {
                report = Some(*r);
            }
        })?;
        if let Some(r) = report {
            emit(&mut log, &csv_line(&r))?;
        }
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&out_dir.join(epoch_file(state.epoch)), &state, &meta)?;
        }
        save_checkpoint(&out_dir.join("last.bin"), &state, &meta)?;
    }
    info!("finished at epoch {} step {}", state.epoch, state.step);
    Ok(())
}

fn epoch_file(epoch: u64) -> String {
    format!("checkpoint-epoch-{epoch:04}.bin")
}

fn check_fingerprint(meta: &CheckpointMeta, vocab: &Vocabulary) -> Result<()> {
    match &meta.vocab_fingerprint {
        Some(fp) if *fp != vocab.fingerprint() => {
            Err(o2r::CheckpointError::VocabularyMismatch(format!(
                "checkpoint was trained with vocabulary {fp}, got {}",
                vocab.fingerprint()
            ))
            .into())
        }
        _ => Ok(()),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    cfg.vocab = args.vocab.clone().or(cfg.vocab);
    let d = &mut cfg.decode;
    if args.greedy {
        d.strategy = Strategy::Greedy;
    }
    if let Some(w) = args.beam {
        d.strategy = Strategy::Beam;
        d.beam_width = w;
    }
    if args.sample {
        d.strategy = Strategy::Sample;
    }
    if let Some(t) = args.temperature {
        d.temperature = t;
    }
    if let Some(s) = args.seed {
        d.seed = s;
    }
    if args.sample_latent {
        d.deterministic_latent = false;
    }
    d.attention |= args.attention;

    let (state, meta) =
        load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let vocab_path = cfg.require_vocab()?;
    let vocab = Vocabulary::load(vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    check_fingerprint(&meta, &vocab)?;
    if vocab.len() != state.params.dims.vocab {
        return Err(o2r::CheckpointError::VocabularyMismatch(format!(
            "checkpoint expects {} tokens, vocabulary has {}",
            state.params.dims.vocab,
            vocab.len()
        ))
        .into());
    }
    // unset lengths default to twice the longest training sequence
    if let Some(n) = args.max_report_len {
        cfg.decode.max_report_len = n;
    } else if !cfg.explicit.contains("decode.max_report_len") && meta.longest_report > 0 {
        cfg.decode.max_report_len = 2 * meta.longest_report;
    }
    if let Some(n) = args.max_outline_len {
        cfg.decode.max_outline_len = n;
    } else if !cfg.explicit.contains("decode.max_outline_len") && meta.longest_outline > 0 {
        cfg.decode.max_outline_len = 2 * meta.longest_outline;
    }
    cfg.decode.validate()?;

    let inputs: Vec<(String, String)> = match (&args.input, &args.news) {
        (Some(path), None) => read_records(path)
            .with_context(|| format!("reading {}", path.display()))?
            .into_iter()
            .map(|r| (r.id, r.news))
            .collect(),
        (None, Some(text)) => vec![("news".to_string(), text.clone())],
        _ => bail!("give exactly one of --input or --news"),
    };

    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (id, news) in inputs {
        let tokens = tokenize(&news);
        let result = generate(&tokens, &vocab, &state.params, &cfg.decode).with_context(|| format!("item {id:?}"))?;
        serde_json::to_writer(&mut out, &GenerationRecord::new(&id, &result))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn read_generated(path: &Path) -> Result<Vec<GenerationRecord>> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?);
    }
    Ok(out)
}

struct LengthStats {
    mean: f64,
    min: usize,
    max: usize,
}

fn length_stats(seqs: &[Vec<String>]) -> LengthStats {
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    LengthStats {
        mean: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
        min: lens.iter().copied().min().unwrap_or(0),
        max: lens.iter().copied().max().unwrap_or(0),
    }
}

fn mean_repetition(seqs: &[Vec<String>]) -> f64 {
    seqs.iter().map(|s| repetition_rate(s, 2)).sum::<f64>() / seqs.len().max(1) as f64
}

fn cmd_evaluate(generated: &Path, reference: &Path) -> Result<()> {
    let cands = read_generated(generated)?;
    let file = fs::File::open(reference).with_context(|| format!("reading {}", reference.display()))?;
    let refs: BTreeMap<String, String> = parse_records(file)?
        .into_iter()
        .map(|r| (r.id, r.report.unwrap_or_default()))
        .collect();
    let gen_ids: HashSet<&str> = cands.iter().map(|c| c.id.as_str()).collect();
    let mut unmatched: Vec<String> = cands
        .iter()
        .filter(|c| !refs.contains_key(&c.id))
        .map(|c| format!("{} (generated only)", c.id))
        .collect();
    unmatched.extend(
        refs.keys()
            .filter(|id| !gen_ids.contains(id.as_str()))
            .map(|id| format!("{id} (reference only)")),
    );
    if !unmatched.is_empty() {
        bail!("unmatched ids: {}", unmatched.join(", "));
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> = cands
        .iter()
        .map(|c| (tokenize(&c.report), tokenize(&refs[&c.id])))
        .collect();
    if pairs.is_empty() {
        warn!("no generated items");
    }
    let sentence = pairs.iter().map(|(c, r)| bleu(c, r, 4)).sum::<f64>() / pairs.len().max(1) as f64;
    let (c_seqs, r_seqs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let (cl, rl) = (length_stats(&c_seqs), length_stats(&r_seqs));
    println!("items: {}", pairs.len());
    println!("mean sentence BLEU: {sentence:.6}");
    println!("corpus BLEU: {:.6}", corpus_bleu(&pairs, 4));
    println!("bigram repetition (candidates): {:.6}", mean_repetition(&c_seqs));
    println!("bigram repetition (references): {:.6}", mean_repetition(&r_seqs));
    println!("candidate length: mean {:.2} min {} max {}", cl.mean, cl.min, cl.max);
    println!("reference length: mean {:.2} min {} max {}", rl.mean, rl.min, rl.max);
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let checks = run_gradcheck(seed)?;
    println!("epsilon {EPSILON:e}, tolerance {TOLERANCE:e}");
    for c in &checks {
        println!(
            "{:<20} {:.3e} {}",
            c.name,
            c.relative_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} parameter blocks failed the gradient check");
    }
    Ok(())
}

fn cmd_compare(pairs: usize, epochs: u64, seed: u64) -> Result<()> {
    let table = run_comparison(hierarchical_corpus(pairs, seed), 1.0 / 6.0, comparison_config(), epochs)?;
    print!("{table}");
    Ok(())
}
