//! Command-line front end.
//!
//! Every subcommand writes plain CSV/text under `--out` and exits with 0 on
//! success and 2 on any error. Numeric settings come from flags, then from
//! the `--config` file (`key=value` lines, keys named like the flags), then
//! from built-in defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::attn_stats::{
    aggregate, aggregate_stream, best_heads, export_matrix, render_svg, window_curve, write_window_csv, HeadStatTable,
    StatsError,
};
use crate::corpus::{
    corpus_stats, format_baseline, parse_segmented_line, read_corpus, CharVocab, CorpusError, Granularity,
    SegmentedSentence, SyntheticLanguage, SyntheticParams,
};
use crate::dumps::{read_dump, DumpError, DumpRecord, DumpWriter};
use crate::encoder::{load_checkpoint, save_checkpoint, train_mlm, Encoder, EncoderError, MlmHyper, ModelConfig};
use crate::exec::{set_thread_limit, Exec};
use crate::finetune::{
    finetune, probe_model, DeltaReport, FinetuneError, FinetuneHyper, ProbeDataset, TaskExample, TaskKind, TaskSpec,
};
use crate::probe::{layer_sweep, FeatureSet, ProbeConfig, ProbeError};
use crate::ForwardTrace;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wordprobe", version, about = "Word-structure analysis for character-level transformer encoders")]
struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of key=value defaults, overridden by flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Word-segmented sentences.
    Corpus,
    /// `label<TAB>sentence`, label from the character set only.
    Bag,
    /// `label<TAB>first<TAB>second`, label from the two character sets.
    Pair,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    /// BMES tagging of a segmented corpus.
    Tagging,
    /// `label<TAB>sentence` lines.
    Classify,
    /// `label<TAB>first<TAB>second` lines.
    Pair,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic word-structured corpus or task file.
    Synth {
        #[arg(long, default_value_t = 1000)]
        sentences: usize,
        #[arg(long, value_enum, default_value_t = GranularityArg::Fine)]
        granularity: GranularityArg,
        #[arg(long, value_enum, default_value_t = SynthKind::Corpus)]
        kind: SynthKind,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics and the uniform-attention baseline.
    Stats {
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train an encoder with the masked language model objective.
    TrainMlm {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write traces of a checkpoint over a corpus as an archive.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Attention statistics per head, best heads and window curves.
    Analyze {
        #[arg(long, requires = "corpus", conflicts_with = "dump")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Export one attention matrix, `LAYER:HEAD:SENTENCE` (all 1-based).
        #[arg(long)]
        matrix: Vec<String>,
        /// Also render exported matrices as SVG.
        #[arg(long)]
        svg: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Layer-wise BMES probing.
    Probe {
        #[arg(long, requires_all = ["train", "dev", "test"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, requires_all = ["dev_dump", "test_dump"], conflicts_with = "checkpoint")]
        train_dump: Option<PathBuf>,
        #[arg(long)]
        dev_dump: Option<PathBuf>,
        #[arg(long)]
        test_dump: Option<PathBuf>,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint on a task and save the result.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Probe a base and fine-tuned checkpoints and report F1 deltas.
    DeltaReport {
        #[arg(long)]
        base: PathBuf,
        /// `NAME=CHECKPOINT_DIR`, repeatable.
        #[arg(long)]
        tuned: Vec<String>,
        /// `NAME=TRAIN,DEV,TEST`, repeatable.
        #[arg(long, required = true)]
        dataset: Vec<String>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

const CONFIG_KEYS: [&str; 11] =
    ["layers", "heads", "dim", "max-len", "lr", "epochs", "batch", "dropout", "mask-ratio", "seed", "threads"];
const DEFAULT_SEED: u64 = 42;

/// Settings file contents.
#[derive(Debug, Default)]
struct Config(BTreeMap<String, String>);

impl Config {
    fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            let k = k.trim().replace('_', "-");
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("{}:{}: unknown key {k}", path.display(), i + 1)));
            }
            map.insert(k, v.trim().to_string());
        }
        Ok(Config(map))
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("config {key}={v} is not valid"))),
            None => Ok(default),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

/// Run the CLI on `args` (including the program name); returns the exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    let threads: Option<usize> = match cli.threads {
        Some(t) => Some(t),
        None => config
            .0
            .get("threads")
            .map(|v| v.parse())
            .transpose()
            .map_err(|_| CliError::Usage("config threads is not a number".into()))?,
    };
    if let Some(t) = threads {
        set_thread_limit(t).map_err(CliError::Usage)?;
    }
    let exec = Exec::Parallel;
    match cli.command {
        Command::Synth { sentences, granularity, kind, seed, out } => {
            cmd_synth(sentences, granularity, kind, config.get(seed, "seed", DEFAULT_SEED)?, &out)
        }
        Command::Stats { corpora, out } => cmd_stats(&corpora, &out),
        Command::TrainMlm { corpus, model, train, mask_ratio, out } => {
            cmd_train_mlm(&config, &corpus, &model, &train, mask_ratio, &out, exec)
        }
        Command::Dump { checkpoint, corpus, out } => cmd_dump(&checkpoint, &corpus, &out, exec),
        Command::Analyze { checkpoint, corpus, dump, matrix, svg, out } => {
            cmd_analyze(checkpoint.as_deref(), corpus.as_deref(), dump.as_deref(), &matrix, svg, &out, exec)
        }
        Command::Probe { checkpoint, train, dev, test, train_dump, dev_dump, test_dump, train_flags, out } => {
            let cfg = probe_config(&config, &train_flags)?;
            let sets = match (checkpoint, train_dump) {
                (Some(ck), _) => {
                    let (model, vocab) = load_checkpoint(&ck)?;
                    let f = |p: &Option<PathBuf>| -> Result<FeatureSet> {
                        let sents = read_corpus(p.as_deref().expect("required by clap"))?;
                        Ok(FeatureSet::from_encoder(&model, &vocab, &sents, exec)?)
                    };
                    [f(&train)?, f(&dev)?, f(&test)?]
                }
                (None, Some(tr)) => {
                    let f = |p: &Path| -> Result<FeatureSet> {
                        let records = read_dump(p)?.collect::<std::result::Result<Vec<_>, _>>()?;
                        let items: Vec<_> = records.iter().map(|r| (&r.trace, &r.sentence)).collect();
                        Ok(FeatureSet::from_traces(&items)?)
                    };
                    [
                        f(&tr)?,
                        f(dev_dump.as_deref().expect("required by clap"))?,
                        f(test_dump.as_deref().expect("required by clap"))?,
                    ]
                }
                (None, None) => {
                    return Err(CliError::Usage("probe needs --checkpoint with corpora or --train-dump".into()))
                }
            };
            let result = layer_sweep(&sets[0], &sets[1], &sets[2], &cfg, exec)?;
            let path = out.join("probe.csv");
            let mut w = create(&path)?;
            result.write_csv(&mut w)?;
            finish(w, &path)?;
            println!("best layer {} f1 {:.4}", result.best_layer, result.best().f1);
            Ok(())
        }
        Command::Finetune { checkpoint, task, data, train, out } => {
            cmd_finetune(&config, &checkpoint, task, &data, &train, &out, exec)
        }
        Command::DeltaReport { base, tuned, dataset, train, out } => {
            cmd_delta_report(&config, &base, &tuned, &dataset, &train, &out, exec)
        }
    }
}

fn cmd_synth(count: usize, granularity: GranularityArg, kind: SynthKind, seed: u64, out: &Path) -> Result<()> {
    let lang = SyntheticLanguage::new(SyntheticParams::default());
    let g = match granularity {
        GranularityArg::Fine => Granularity::Fine,
        GranularityArg::Coarse => Granularity::Coarse,
    };
    let mut w = create(out)?;
    let sents = lang.sample(count * if matches!(kind, SynthKind::Pair) { 2 } else { 1 }, g, seed);
    let line = |w: &mut BufWriter<File>, s: String| writeln!(w, "{s}").map_err(io_err(out));
    match kind {
        SynthKind::Corpus => sents.iter().try_for_each(|s| line(&mut w, s.to_string()))?,
        SynthKind::Bag => sents.iter().try_for_each(|s| line(&mut w, format!("{}\t{s}", lang.char_set_label(s))))?,
        SynthKind::Pair => sents.chunks(2).try_for_each(|p| {
            let label = usize::from(lang.char_set_label(&p[0]) == lang.char_set_label(&p[1]));
            line(&mut w, format!("{label}\t{}\t{}", p[0], p[1]))
        })?,
    }
    finish(w, out)
}

fn cmd_stats(corpora: &[PathBuf], out: &Path) -> Result<()> {
    let path = out.join("stats.csv");
    let mut csv_out = csv::Writer::from_writer(create(&path)?);
    csv_out.write_record(["corpus", "sentences", "words", "chars", "avg_sentence_length"])?;
    for p in corpora {
        let stats = corpus_stats(&read_corpus(p)?)?;
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        csv_out.write_record([
            name.clone(),
            stats.sentence_count.to_string(),
            stats.word_count.to_string(),
            stats.char_count.to_string(),
            format!("{:.2}", stats.avg_sentence_length_chars),
        ])?;
        println!("{name}: random baseline {}", format_baseline(stats.random_baseline()));
    }
    csv_out.flush().map_err(io_err(&path))?;
    Ok(())
}

fn cmd_train_mlm(
    config: &Config,
    corpus: &Path,
    model: &ModelFlags,
    train: &TrainFlags,
    mask_ratio: Option<f64>,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let sents = read_corpus(corpus)?;
    let vocab = CharVocab::build(&sents, 1)?;
    let desk = ModelConfig::desk(vocab.size());
    let cfg = ModelConfig {
        layers: config.get(model.layers, "layers", desk.layers)?,
        heads: config.get(model.heads, "heads", desk.heads)?,
        dim: config.get(model.dim, "dim", desk.dim)?,
        vocab_size: vocab.size(),
        max_len: config.get(model.max_len, "max-len", desk.max_len)?,
        dropout: config.get(train.dropout, "dropout", desk.dropout as f64)? as f32,
        seed: config.get(train.seed, "seed", DEFAULT_SEED)?,
    };
    let d = MlmHyper::default();
    let hyper = MlmHyper {
        lr: config.get(train.lr, "lr", d.lr)?,
        epochs: config.get(train.epochs, "epochs", d.epochs)?,
        batch_size: config.get(train.batch, "batch", d.batch_size)?,
        mask_ratio: config.get(mask_ratio, "mask-ratio", d.mask_ratio)?,
        ..d
    };
    let trained = train_mlm(&sents, &vocab, cfg, &hyper, exec)?;
    save_checkpoint(&trained.model, &vocab, &out.join("checkpoint"))?;
    let path = out.join("mlm_loss.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    w.flush().map_err(io_err(&path))?;
    if let Some(l) = trained.epoch_losses.last() {
        println!("final loss {l:.4} (ln V = {:.4})", (vocab.size() as f64).ln());
    }
    Ok(())
}

/// Sentences split to fit the model, with their traces.
fn trace_corpus(
    model: &Encoder<f32>,
    vocab: &CharVocab,
    corpus: &Path,
    exec: Exec,
) -> Result<(Vec<SegmentedSentence>, Vec<ForwardTrace>)> {
    let max_chars = model.config().max_len - 2;
    let pieces: Vec<SegmentedSentence> = read_corpus(corpus)?.iter().flat_map(|s| s.split_to_fit(max_chars)).collect();
    let traces = exec
        .map(&pieces, |s| model.trace_sentence(vocab, s))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((pieces, traces))
}

fn cmd_dump(checkpoint: &Path, corpus: &Path, out: &Path, exec: Exec) -> Result<()> {
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let (pieces, traces) = trace_corpus(&model, &vocab, corpus, exec)?;
    let c = model.config();
    let mut w = DumpWriter::create(out, c.layers, c.heads, c.dim, c.vocab_size, true)?;
    for (t, s) in traces.iter().zip(&pieces) {
        let tokens: Vec<String> = t.token_ids.iter().map(|&id| vocab.token_text(id)).collect();
        w.write(t, s, &tokens)?;
    }
    let m = w.finish()?;
    println!("wrote {} records", m.sentences);
    Ok(())
}

struct MatrixRequest {
    layer: usize,
    head: usize,
    sentence: usize,
}

fn parse_matrix(spec: &str) -> Result<MatrixRequest> {
    let bad = || CliError::Usage(format!("--matrix {spec:?}: expected LAYER:HEAD:SENTENCE, all 1-based"));
    let parts: Vec<usize> = spec.split(':').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match parts[..] {
        [l, h, s] if l > 0 && h > 0 && s > 0 => Ok(MatrixRequest { layer: l - 1, head: h - 1, sentence: s - 1 }),
        _ => Err(bad()),
    }
}

fn cmd_analyze(
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    dump: Option<&Path>,
    matrix: &[String],
    svg: bool,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let requests: Vec<MatrixRequest> = matrix.iter().map(|m| parse_matrix(m)).collect::<Result<_>>()?;
    let wanted: BTreeSet<usize> = requests.iter().map(|r| r.sentence).collect();
    // sentence index -> (trace, sentence, tokens) for requested exports
    let mut kept: BTreeMap<usize, (ForwardTrace, SegmentedSentence, Vec<String>)> = BTreeMap::new();

    let table: HeadStatTable = match (checkpoint, dump) {
        (Some(ck), _) => {
            let (model, vocab) = load_checkpoint(ck)?;
            let corpus = corpus.ok_or_else(|| CliError::Usage("--checkpoint needs --corpus".into()))?;
            let (pieces, traces) = trace_corpus(&model, &vocab, corpus, exec)?;
            for &i in &wanted {
                if let (Some(t), Some(s)) = (traces.get(i), pieces.get(i)) {
                    let tokens = t.token_ids.iter().map(|&id| vocab.token_text(id)).collect();
                    kept.insert(i, (t.clone(), s.clone(), tokens));
                }
            }
            let items: Vec<_> = traces.iter().zip(&pieces).collect();
            let c = model.config();
            aggregate(c.layers, c.heads, &items, exec)?
        }
        (None, Some(d)) => {
            let reader = read_dump(d)?;
            let (layers, heads) = (reader.manifest().layers, reader.manifest().heads);
            let kept_ref = &mut kept;
            let stream = reader.enumerate().map(|(i, r)| {
                let DumpRecord { tokens, sentence, trace } = r?;
                if wanted.contains(&i) {
                    kept_ref.insert(i, (trace.clone(), sentence.clone(), tokens));
                }
                Ok::<_, CliError>((trace, sentence))
            });
            aggregate_stream(layers, heads, stream)?
        }
        (None, None) => return Err(CliError::Usage("analyze needs --checkpoint and --corpus, or --dump".into())),
    };

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("head_stats.csv");
    let mut w = create(&path)?;
    table.write_csv(&mut w)?;
    finish(w, &path)?;
    match best_heads(&table) {
        Ok(report) => {
            let path = out.join("best_heads.csv");
            let mut w = create(&path)?;
            report.write_csv(&mut w)?;
            finish(w, &path)?;
            let path = out.join("window_curve.csv");
            let mut w = create(&path)?;
            write_window_csv(&window_curve(&table)?, &mut w)?;
            finish(w, &path)?;
        }
        Err(StatsError::EmptyTable) => eprintln!("no statistics collected; best-head tables skipped"),
        Err(e) => return Err(e.into()),
    }

    for r in &requests {
        let (trace, sent, tokens) = kept
            .get(&r.sentence)
            .ok_or_else(|| CliError::Usage(format!("--matrix: sentence {} does not exist", r.sentence + 1)))?;
        let m = export_matrix(trace, r.layer, r.head, sent, tokens.clone())?;
        let stem = format!("matrix_l{}_h{}_s{}", r.layer + 1, r.head + 1, r.sentence + 1);
        let path = out.join(format!("{stem}.csv"));
        let mut w = create(&path)?;
        m.write_csv(&mut w)?;
        finish(w, &path)?;
        if svg {
            let path = out.join(format!("{stem}.svg"));
            std::fs::write(&path, render_svg(&m, 24)).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn probe_config(config: &Config, flags: &TrainFlags) -> Result<ProbeConfig> {
    let d = ProbeConfig::default();
    Ok(ProbeConfig {
        lr: config.get(flags.lr, "lr", d.lr)?,
        dropout: config.get(flags.dropout, "dropout", d.dropout)?,
        epochs: config.get(flags.epochs, "epochs", d.epochs)?,
        batch_size: config.get(flags.batch, "batch", d.batch_size)?,
        seed: config.get(flags.seed, "seed", d.seed)?,
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.to_string())).collect())
}

/// Labelled task file: the label set is the sorted set of labels found.
fn read_task(path: &Path, task: TaskArg) -> Result<(TaskSpec, Vec<TaskExample>)> {
    let name = path.file_stem().map_or("task".into(), |s| s.to_string_lossy().into_owned());
    if let TaskArg::Tagging = task {
        let ex = read_corpus(path)?.into_iter().map(TaskExample::bmes).collect();
        return Ok((TaskSpec::bmes_tagging(&name), ex));
    }
    let (kind, fields) = match task {
        TaskArg::Classify => (TaskKind::SentenceClassification, 2),
        _ => (TaskKind::SentencePairClassification, 3),
    };
    let at = |line: usize, e: CorpusError| CorpusError::AtLine {
        path: path.display().to_string(),
        line,
        source: Box::new(e),
    };
    let mut rows = Vec::new();
    for (line, text) in read_lines(path)? {
        let parts: Vec<&str> = text.split('\t').collect();
        if parts.len() != fields {
            return Err(CliError::Usage(format!("{}:{line}: expected {fields} tab-separated fields", path.display())));
        }
        let sents = parts[1..]
            .iter()
            .map(|p| parse_segmented_line(p).map_err(|e| at(line, e)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push((parts[0].trim().to_string(), sents));
    }
    let labels: Vec<String> = rows.iter().map(|(l, _)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let index = |l: &str| labels.iter().position(|x| x == l).unwrap();
    let examples = rows
        .into_iter()
        .map(|(l, mut s)| match kind {
            TaskKind::SentenceClassification => TaskExample::Single { sentence: s.remove(0), label: index(&l) },
            _ => {
                let second = s.pop().unwrap();
                TaskExample::Pair { first: s.pop().unwrap(), second, label: index(&l) }
            }
        })
        .collect();
    Ok((TaskSpec { name, kind, labels }, examples))
}

fn cmd_finetune(
    config: &Config,
    checkpoint: &Path,
    task: TaskArg,
    data: &Path,
    flags: &TrainFlags,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let (mut model, vocab) = load_checkpoint(checkpoint)?;
    let dropout = match flags.dropout {
        Some(p) => Some(p),
        None if config.0.contains_key("dropout") => Some(config.get(None, "dropout", 0.0)?),
        None => None,
    };
    if let Some(p) = dropout {
        let cfg = ModelConfig { dropout: p as f32, ..model.config().clone() };
        model = Encoder::from_params(cfg, model.params().to_vec())?;
    }
    let (spec, examples) = read_task(data, task)?;
    let d = FinetuneHyper::default();
    let hyper = FinetuneHyper {
        lr: config.get(flags.lr, "lr", d.lr)?,
        epochs: config.get(flags.epochs, "epochs", d.epochs)?,
        batch_size: config.get(flags.batch, "batch", d.batch_size)?,
        seed: config.get(flags.seed, "seed", d.seed)?,
        ..d
    };
    let tuned = finetune(&model, &vocab, &spec, &examples, &hyper, exec)?;
    save_checkpoint(&tuned.model, &vocab, &out.join("checkpoint"))?;
    let path = out.join("finetune_loss.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["epoch", "loss"])?;
    for (i, l) in tuned.epoch_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

fn split_named(spec: &str, what: &str) -> Result<(String, String)> {
    spec.split_once('=')
        .filter(|(n, v)| !n.is_empty() && !v.is_empty())
        .map(|(n, v)| (n.to_string(), v.to_string()))
        .ok_or_else(|| CliError::Usage(format!("{what} {spec:?}: expected NAME=VALUE")))
}

fn cmd_delta_report(
    config: &Config,
    base: &Path,
    tuned: &[String],
    datasets: &[String],
    flags: &TrainFlags,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let cfg = probe_config(config, flags)?;
    let mut suite = Vec::new();
    for spec in datasets {
        let (name, paths) = split_named(spec, "--dataset")?;
        let p: Vec<&str> = paths.split(',').collect();
        let [train, dev, test] = p[..] else {
            return Err(CliError::Usage(format!("--dataset {spec:?}: expected NAME=TRAIN,DEV,TEST")));
        };
        suite.push(ProbeDataset {
            name,
            train: read_corpus(Path::new(train))?,
            dev: read_corpus(Path::new(dev))?,
            test: read_corpus(Path::new(test))?,
        });
    }
    let (base_model, vocab) = load_checkpoint(base)?;
    let base_probe = probe_model("base", &base_model, &vocab, &suite, &cfg, exec)?;
    let mut probes = Vec::new();
    for spec in tuned {
        let (name, dir) = split_named(spec, "--tuned")?;
        let (model, tuned_vocab) = load_checkpoint(Path::new(&dir))?;
        if tuned_vocab.hash() != vocab.hash() || !model.config().same_shape(base_model.config()) {
            return Err(FinetuneError::ConfigMismatch(format!("{name} does not match the base checkpoint")).into());
        }
        probes.push(probe_model(&name, &model, &vocab, &suite, &cfg, exec)?);
    }
    let report = DeltaReport::new(suite.iter().map(|d| d.name.clone()).collect(), base_probe, probes)?;
    let path = out.join("delta_report.csv");
    let mut w = create(&path)?;
    report.write_csv(&mut w)?;
    finish(w, &path)?;
    let path = out.join("delta_layers.csv");
    let mut w = create(&path)?;
    report.write_layer_csv(&mut w)?;
    finish(w, &path)?;
    for t in 0..report.tuned.len() {
        println!("{}: average delta {:+.2} points", report.tuned[t].name, 100.0 * report.average_delta(t));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn matrix_specs() {
        let r = parse_matrix("2:3:10").unwrap();
        assert_eq!((r.layer, r.head, r.sentence), (1, 2, 9));
        assert!(parse_matrix("0:1:1").is_err());
        assert!(parse_matrix("1:1").is_err());
        assert!(parse_matrix("a:1:1").is_err());
    }

    #[test]
    fn config_file_values_yield_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# desk run\nlayers = 3\nmax_len=40\nlr=0.01\n").unwrap();
        let c = Config::load(Some(&path)).unwrap();
        assert_eq!(c.get(None, "layers", 4usize).unwrap(), 3);
        assert_eq!(c.get(Some(6), "layers", 4usize).unwrap(), 6);
        assert_eq!(c.get(None, "max-len", 64usize).unwrap(), 40);
        assert_eq!(c.get(None, "heads", 4usize).unwrap(), 4);
        std::fs::write(&path, "colour=blue\n").unwrap();
        assert!(Config::load(Some(&path)).is_err());
    }

    #[test]
    fn exit_codes() {
        let run = |args: &[&str]| {
            main_with_args(std::iter::once("wordprobe").chain(args.iter().copied()).map(OsString::from))
        };
        assert_eq!(run(&["--help"]), 0);
        assert_eq!(run(&["no-such-command"]), 2);
        assert_eq!(run(&["stats", "/definitely/missing.txt", "--out", "/tmp"]), 2);
    }
}
