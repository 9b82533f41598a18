use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crovca::dataio::{
    read_checkpoint, read_codes, read_embeddings, read_embeddings_csv, read_labels, write_checkpoint, write_codes,
    write_embeddings, write_labels,
};
use crovca::evalkit::{code_stats, evaluate, Metric};
use crovca::exec::with_threads;
use crovca::hashcoder::{Encoder, HeadId};
use crovca::pairing::{default_noise_sigma, PairSource, PairingConfig, PairingMode};
use crovca::retrieval::{topk, Measure, PackedCodeSet, QueryBatch, RankedList};
use crovca::synthetic::{gaussian_clusters, ClusterSpec};
use crovca::trainer::{eval_logits, train_with, TrainConfig, Variant, ENCODE_CHUNK};
use crovca::{DenseMatrix, Error, Execution, LabelSet, Result};

#[derive(Parser)]
#[command(
    name = "crovca",
    version,
    about = "Learn binary hash codes from precomputed embeddings and search them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hash head and write a checkpoint; the training log goes to stdout.
    Train(TrainArgs),
    /// Encode embeddings into a code file.
    Encode(EncodeArgs),
    /// Rank database codes for each query; prints a rankings table.
    Query(QueryArgs),
    /// Score rankings (from a file, stdin, or computed directly) against labels.
    Eval(EvalArgs),
    /// Bit activation rates, entropies and unique-code count of a code file.
    Stats(StatsArgs),
    /// Write a seeded Gaussian-cluster data set (train/db/query embeddings and labels).
    Synth(SynthArgs),
    /// Convert a headerless CSV of embeddings into the binary embedding format.
    ImportCsv(ImportCsvArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Two augmented views of one file, or two precomputed view files.
    Unsup,
    /// Each row paired with its class batch-mean; needs --labels.
    Sup,
    /// Two aligned modalities, one head each.
    Dual,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    /// 2 hidden layers of width 512; lr 1e-3, wd 1e-2.
    Small,
    /// 3 hidden layers of width 2048; lr 1e-4, wd 1e-4.
    Large,
}

#[derive(Args)]
struct TrainArgs {
    /// Embedding file(s): one file, or two comma-separated files for paired views.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    views: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "unsup")]
    mode: ModeArg,
    /// Labels for --mode sup.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Code length b.
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Learning rate [default: 1e-3 small, 1e-4 large].
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW weight decay [default: 1e-2 small, 1e-4 large].
    #[arg(long)]
    wd: Option<f64>,
    /// Weight of the coding-rate term.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Hidden layers [default: 2 small, 3 large].
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width [default: 512 small, 2048 large].
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum, default_value = "small")]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Gaussian noise std for embedding augmentation [default: 0.1 × RMS entry].
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Coordinate dropout rate for embedding augmentation [default: 0.1].
    #[arg(long)]
    dropout: Option<f64>,
    /// Scale constant d of the coding rate [default: bits].
    #[arg(long)]
    rate_d: Option<usize>,
    /// Compute the coding rate on view-1 logits only instead of both views.
    #[arg(long)]
    single_view_rate: bool,
    /// Permit --lambda 0 (ablation runs).
    #[arg(long)]
    allow_zero_lambda: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Embedding file to encode.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also store f32 logits (needed for symbce search).
    #[arg(long)]
    logits: bool,
    /// Head of a dual-stream model.
    #[arg(long, default_value_t = 1)]
    head: u8,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// Database code file.
    #[arg(long)]
    db: PathBuf,
    /// Query embedding file.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Distance: h (Hamming), ah (asymmetric Hamming), bce, symbce.
    #[arg(long, default_value = "ah")]
    measure: String,
    /// Head of a dual-stream model used for the queries.
    #[arg(long, default_value_t = 1)]
    head: u8,
    /// Worker threads for the scan (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Write rankings here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// map@K or recall@K, e.g. map@1000, map@5000, recall@1.
    #[arg(long, default_value = "map@1000")]
    metric: String,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    db_labels: PathBuf,
    /// Rankings from `query` ("-" reads stdin). Omit to rank directly.
    #[arg(long, conflicts_with_all = ["db", "queries", "model"])]
    rankings: Option<PathBuf>,
    #[arg(long, requires_all = ["queries", "model"])]
    db: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "ah")]
    measure: String,
    #[arg(long, default_value_t = 1)]
    head: u8,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Code file.
    #[arg(long)]
    codes: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives {train,db,query}.cvca and .cvlb.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 2000)]
    db: usize,
    #[arg(long, default_value_t = 500)]
    query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportCsvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn execution(threads: usize) -> Execution {
    if threads == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::for_variant(
        match a.variant {
            VariantArg::Small => Variant::Small,
            VariantArg::Large => Variant::Large,
        },
        a.bits,
    );
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.lambda = a.lambda;
    cfg.seed = a.seed;
    cfg.rate_scale_d = a.rate_d;
    cfg.pool_both_views = !a.single_view_rate;
    cfg.allow_zero_lambda = a.allow_zero_lambda;
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.wd {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.layers {
        cfg.hidden_layers = v;
    }
    if let Some(v) = a.width {
        cfg.hidden_width = v;
    }
    cfg.validate()?;

    let view_count = a.views.len();
    let pairing_mode = match (a.mode, view_count) {
        (ModeArg::Unsup, 1) => PairingMode::EmbeddingAugmentation,
        (ModeArg::Unsup, 2) => PairingMode::PrecomputedPairs,
        (ModeArg::Sup, 1) => PairingMode::ClassBatchMean,
        (ModeArg::Dual, 2) => PairingMode::DualStream,
        (ModeArg::Sup, _) => return Err(Error::Config("--mode sup takes exactly one --views file".into())),
        (ModeArg::Dual, _) => return Err(Error::Config("--mode dual needs two --views files".into())),
        (ModeArg::Unsup, _) => return Err(Error::Config("--views takes one or two files".into())),
    };
    if a.mode == ModeArg::Sup && a.labels.is_none() {
        return Err(Error::Config("--mode sup requires --labels".into()));
    }
    if a.mode != ModeArg::Sup && a.labels.is_some() {
        return Err(Error::Config("--labels is only used with --mode sup".into()));
    }
    let augmenting = pairing_mode == PairingMode::EmbeddingAugmentation;
    if !augmenting && (a.noise_sigma.is_some() || a.dropout.is_some()) {
        return Err(Error::Config(
            "--noise-sigma and --dropout apply only to single-file unsupervised training".into(),
        ));
    }

    let first = read_embeddings(&a.views[0])?;
    let second = match a.views.get(1) {
        Some(p) => Some(read_embeddings(p)?),
        None => None,
    };
    let labels = match &a.labels {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    let mut pairing = PairingConfig::new(pairing_mode);
    pairing.seed = a.seed;
    if augmenting {
        pairing.noise_sigma = a.noise_sigma.unwrap_or_else(|| default_noise_sigma(&first));
        if let Some(p) = a.dropout {
            pairing.dropout_rate = p;
        }
    }
    let source = match (pairing_mode, &second, &labels) {
        (PairingMode::EmbeddingAugmentation, _, _) => PairSource::Augmented { embeddings: &first },
        (PairingMode::PrecomputedPairs, Some(s), _) => PairSource::Precomputed {
            first: &first,
            second: s,
        },
        (PairingMode::DualStream, Some(s), _) => PairSource::DualStream {
            first: &first,
            second: s,
        },
        (PairingMode::ClassBatchMean, _, Some(l)) => PairSource::ClassMean {
            embeddings: &first,
            labels: l,
        },
        _ => unreachable!("mode and inputs checked above"),
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(
        out,
        "# train mode={} rows={} bits={} epochs={} batch={} lr={} wd={} lambda={} layers={} width={} seed={}",
        pairing_mode,
        source.rows(),
        cfg.code_bits,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.weight_decay,
        cfg.lambda,
        cfg.hidden_layers,
        cfg.hidden_width,
        cfg.seed
    )?;
    let outcome = train_with(&source, &pairing, &cfg, |_| {})?;
    out.write_all(outcome.log.to_text().as_bytes())?;
    write_checkpoint(&outcome.encoder, &a.out)?;
    writeln!(out, "# checkpoint {}", a.out.display())?;
    Ok(())
}

fn head_model(encoder: &Encoder, head: u8) -> Result<&crovca::HashCoderModel> {
    encoder.head(HeadId::from_number(head)?)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let encoder = read_checkpoint(&a.model)?;
    let model = head_model(&encoder, a.head)?;
    let x = read_embeddings(&a.input)?;
    let exec = execution(a.threads);
    let z = with_threads(a.threads, || eval_logits(model, &x, ENCODE_CHUNK, exec))?;
    let codes = PackedCodeSet::from_logits(&z, a.logits)?;
    write_codes(&codes, a.logits, &a.out)
}

fn rank(s: &SearchArgs, k: usize) -> Result<RankedList> {
    let measure: Measure = s.measure.parse()?;
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let db = read_codes(&s.db)?;
    if measure == Measure::SymBce && !db.has_logits() {
        return Err(Error::Capability(format!(
            "symbce needs database logits; re-encode {} with --logits",
            s.db.display()
        )));
    }
    let encoder = read_checkpoint(&s.model)?;
    let model = head_model(&encoder, s.head)?;
    let x = read_embeddings(&s.queries)?;
    let exec = execution(s.threads);
    with_threads(s.threads, || {
        let queries = QueryBatch::from_logits(eval_logits(model, &x, ENCODE_CHUNK, exec)?)?;
        topk(&db, &queries, measure, k, exec)
    })
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let ranked = rank(&a.search, a.k)?;
    let text = ranked.to_text();
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_rankings(path: &Path) -> Result<RankedList> {
    let text = if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(path)?
    };
    RankedList::parse(&text)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let q_labels = read_labels(&a.query_labels)?;
    let db_labels = read_labels(&a.db_labels)?;
    let ranked = match (&a.rankings, &a.db, &a.queries, &a.model) {
        (Some(p), _, _, _) => read_rankings(p)?,
        (None, Some(db), Some(queries), Some(model)) => {
            let search = SearchArgs {
                db: db.clone(),
                queries: queries.clone(),
                model: model.clone(),
                measure: a.measure.clone(),
                head: a.head,
                threads: a.threads,
            };
            rank(&search, metric.cutoff())?
        }
        _ => {
            return Err(Error::Config(
                "eval needs --rankings, or --db, --queries and --model to rank directly".into(),
            ))
        }
    };
    let exec = execution(a.threads);
    let report = with_threads(a.threads, || evaluate(metric, &ranked, &q_labels, &db_labels, exec))?;
    println!("{}", report.to_key_values());
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let codes = read_codes(&a.codes)?;
    println!("{}", code_stats(&codes)?.to_key_values());
    Ok(())
}

fn write_split(dir: &Path, name: &str, x: &DenseMatrix, labels: &LabelSet) -> Result<()> {
    write_embeddings(x, dir.join(format!("{name}.cvca")))?;
    write_labels(labels, dir.join(format!("{name}.cvlb")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = ClusterSpec {
        classes: a.classes,
        dim: a.dim,
        train_rows: a.train,
        db_rows: a.db,
        query_rows: a.query,
        seed: a.seed,
        ..Default::default()
    };
    let data = gaussian_clusters(&spec)?;
    fs::create_dir_all(&a.out)?;
    write_split(&a.out, "train", &data.train.embeddings, &data.train.labels)?;
    write_split(&a.out, "db", &data.db.embeddings, &data.db.labels)?;
    write_split(&a.out, "query", &data.query.embeddings, &data.query.labels)
}

fn cmd_import_csv(a: ImportCsvArgs) -> Result<()> {
    write_embeddings(&read_embeddings_csv(&a.input)?, &a.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Query(a) => cmd_query(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ImportCsv(a) => cmd_import_csv(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crovca: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
