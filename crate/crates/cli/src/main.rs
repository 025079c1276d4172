//! `mlrm`: generate data, train, evaluate, analyse and query.

mod manifest;

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlrm::analysis::{batch_flows, SaliencyReport};
use mlrm::data::{make_batches, read_jsonl, Dataset, Note, NoteId, Pair, PairConfig, SynthConfig};
use mlrm::eval::{
    build_table, evaluate, thread_count, topk, EmbeddingTable, EvalReport, EvalSlice, EvalSpec, Retriever,
};
use mlrm::model::{Modality, Mode};
use mlrm::train::{load_checkpoint, save_checkpoint, OptimConfig, RunConfig};
use mlrm::{Checkpoint64, Error, Result, Trainer64};

use manifest::{file_sha256, Manifest};

#[derive(Parser)]
#[command(name = "mlrm", version, about = "Multimodal note representation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic note corpus, behavior log and mined pairs.
    GenData(GenDataArgs),
    /// Train a model variant on a generated dataset.
    Train(TrainArgs),
    /// Recall@K of a checkpoint on held-out pairs.
    Eval(EvalArgs),
    /// Attention saliency flow across LM layers.
    Analyze(AnalyzeArgs),
    /// Write a binary embedding table for a set of notes.
    ExportEmbeddings(ExportArgs),
    /// Print the nearest notes of one note in an embedding table.
    Query(QueryArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    notes: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    /// Probability that a note's image matches its text cluster, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Notes held out as the retrieval pool.
    #[arg(long, default_value_t = 500)]
    pool_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config with sections model, data, loss, optim, run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// basic, micl, late_fusion, notellm2, only_late_fusion or omni.
    #[arg(long)]
    mode: Option<String>,
    /// Dataset directory (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer preset applied before the other flags: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from this checkpoint instead of starting afresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs to score (JSON lines).
    #[arg(long)]
    pairs: PathBuf,
    /// Retrieval pool notes (JSON lines).
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "multimodal")]
    modality: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "42")]
    seeds: Vec<u64>,
    /// Notes drawn per seed from the pool; defaults to the whole pool.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Also report the BM25 text baseline.
    #[arg(long)]
    bm25: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; batches come from its validation pairs.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    notes: PathBuf,
    #[arg(long, default_value = "multimodal")]
    modality: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    note_id: NoteId,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Mode(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Batching(_) => 3,
        Error::NonFinite { .. } | Error::ZeroNorm(_) | Error::EmptySet(_) | Error::DegenerateMask { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Query(a) => query(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())))
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut m = Manifest::start("gen-data");
    let synth = SynthConfig::new(a.seed, a.notes, a.clusters, a.rho);
    synth.validate()?;
    if a.out.is_file() {
        return Err(Error::Config(format!("{} is a file, not a directory", a.out.display())));
    }
    let data = Dataset::generate(&synth, &PairConfig::default(), a.pool_size)?;
    m.seed = Some(a.seed);
    m.outputs = data.write(&a.out)?;
    m.details = serde_json::json!({
        "notes": data.notes.len(),
        "events": data.events.len(),
        "pairs": data.pairs.len(),
        "train_pairs": data.split.train.len(),
        "val_pairs": data.split.val.len(),
        "test_pairs": data.split.test.len(),
        "pool": data.split.pool.len(),
        "vocab": data.vocab.len(),
        "synth": synth,
    });
    m.write(&a.out.join("manifest.json"))
}

/// Defaults, then the config file, then flags.
fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.profile {
        let steps = cfg.optim.steps;
        cfg.optim = OptimConfig::profile(p)?;
        cfg.optim.steps = steps;
    }
    if let Some(mode) = &a.mode {
        cfg.model.mode = mode.parse::<Mode>()?;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = d.clone();
    }
    if let Some(s) = a.steps {
        cfg.optim.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(b) = a.batch_size {
        cfg.data.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optim.peak_lr = lr;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.run.checkpoint_every = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut m = Manifest::start("train");
    m.config_path = a.config.clone();
    let (mut trainer, resumed) = match &a.resume {
        Some(path) => {
            let ckpt: Checkpoint64 = load_checkpoint(path)?;
            let mut cfg = ckpt.config.clone();
            if let Some(s) = a.steps {
                cfg.optim.steps = s;
            }
            if let Some(d) = &a.data {
                cfg.data.dir = d.clone();
            }
            if a.mode.as_deref().is_some_and(|md| md != cfg.model.mode.name()) {
                return Err(Error::Config("--mode cannot change when resuming".into()));
            }
            let data = Dataset::load(&cfg.data.dir)?;
            m.inputs.push(path.clone());
            let t = Trainer64::from_state(ckpt.state, cfg, data.notes, &data.split.train, ckpt.vocab)?;
            (t, true)
        }
        None => {
            let cfg = resolve_run_config(&a)?;
            let data = Dataset::load(&cfg.data.dir)?;
            let t = Trainer64::new(cfg, data.notes, &data.split.train, data.vocab)?;
            (t, false)
        }
    };
    let cfg = trainer.config.clone();
    m.seed = Some(cfg.run.seed);
    m.inputs.push(cfg.data.dir.clone());

    let ckpt_dir = a.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&metrics_path)?;

    let save = |t: &Trainer64, path: &Path| {
        save_checkpoint(
            path,
            &Checkpoint64 {
                state: t.state.clone(),
                config: t.config.clone(),
                vocab: t.vocab.clone(),
            },
        )
    };
    while trainer.state.step < cfg.optim.steps {
        let s = trainer.step()?;
        writeln!(metrics, "{}", serde_json::to_string(&s)?)?;
        if s.step % 50 == 0 || s.step == cfg.optim.steps {
            eprintln!("step {:>5}  loss {:.5}  lr {:.2e}  tau {:.4}", s.step, s.loss, s.lr, s.tau);
        }
        if cfg.run.checkpoint_every > 0 && s.step % cfg.run.checkpoint_every == 0 {
            save(&trainer, &ckpt_dir.join(format!("step-{:06}.bin", s.step)))?;
        }
    }
    let final_path = a.out.join("checkpoint.bin");
    save(&trainer, &final_path)?;
    m.outputs = vec![final_path, metrics_path, a.out.join("config.json"), ckpt_dir];
    m.details = serde_json::json!({ "mode": cfg.model.mode, "steps": trainer.state.step, "resumed": resumed });
    m.write(&a.out.join("manifest.json"))
}

fn parse_modalities(names: &[String]) -> Result<Vec<Modality>> {
    names.iter().map(|s| s.parse()).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut m = Manifest::start("eval");
    for p in [&a.checkpoint, &a.pairs, &a.pool] {
        require_file(p)?;
    }
    let modalities = parse_modalities(&a.modality)?;
    let spec = EvalSpec {
        ks: a.k.clone(),
        slices: EvalSlice::EVERY.to_vec(),
        seeds: a.seeds.clone(),
        pool_size: a.pool_size,
    };
    spec.validate()?;
    let ckpt: Checkpoint64 = load_checkpoint(&a.checkpoint)?;
    let pairs: Vec<Pair> = read_jsonl(&a.pairs)?;
    let pool: Vec<Note> = read_jsonl(&a.pool)?;
    let threads = thread_count()?;
    let model = &ckpt.state.model;
    let variant = model.mode().name();

    let mut rows = Vec::new();
    for modality in &modalities {
        let table = build_table(model, &pool, &ckpt.vocab, *modality, threads)?;
        rows.extend(evaluate(
            variant,
            modality.name(),
            &Retriever::Embeddings(&table),
            &pool,
            &pairs,
            &spec,
        )?);
    }
    if a.bm25 {
        rows.extend(evaluate("bm25", "text", &Retriever::Bm25, &pool, &pairs, &spec)?);
    }
    let report = EvalReport::new(&spec, pool.len(), rows);

    std::fs::create_dir_all(&a.out)?;
    let json = a.out.join("eval.json");
    let csv = a.out.join("eval.csv");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(&csv, report.to_csv())?;
    m.inputs = vec![a.checkpoint.clone(), a.pairs.clone(), a.pool.clone()];
    m.outputs = vec![json, csv];
    m.seed = a.seeds.first().copied();
    m.details = serde_json::json!({ "checkpoint_sha256": file_sha256(&a.checkpoint)?, "mode": variant });
    m.write(&a.out.join("manifest.json"))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut m = Manifest::start("analyze");
    require_file(&a.checkpoint)?;
    if a.batches == 0 {
        return Err(Error::Config("--batches must be at least 1".into()));
    }
    let ckpt: Checkpoint64 = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let b = a.batch_size.unwrap_or(ckpt.config.data.batch_size);
    let model = &ckpt.state.model;
    let notes: std::collections::HashMap<NoteId, &Note> = data.notes.iter().map(|n| (n.id, n)).collect();
    let mut stream = make_batches(&data.split.val, b, a.seed)?;

    let mut flows = Vec::with_capacity(a.batches);
    let mut seen = HashSet::new();
    for _ in 0..a.batches {
        let batch = stream.next_batch()?;
        let inputs = batch
            .notes
            .iter()
            .map(|id| {
                let n = notes
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("pair references unknown note {id}")))?;
                model.prepare(n, &ckpt.vocab, Modality::Multimodal)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = inputs.iter().collect();
        seen.extend(batch.notes.iter().copied());
        flows.push(batch_flows(model, ckpt.state.tau, &refs, &batch.partner, &ckpt.config.loss)?);
    }
    let report = SaliencyReport::from_batches(model.mode(), &flows, a.batches * 2 * b)?;

    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("saliency.csv");
    let json = a.out.join("saliency.json");
    std::fs::write(&csv, report.to_csv())?;
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
    m.seed = Some(a.seed);
    m.inputs = vec![a.checkpoint.clone(), a.dataset.clone()];
    m.outputs = vec![csv, json];
    m.details = serde_json::json!({ "distinct_notes": seen.len(), "batch_size": b });
    m.write(&a.out.join("manifest.json"))
}

fn export(a: ExportArgs) -> Result<()> {
    let mut m = Manifest::start("export-embeddings");
    require_file(&a.checkpoint)?;
    require_file(&a.notes)?;
    let modality: Modality = a.modality.parse()?;
    let ckpt: Checkpoint64 = load_checkpoint(&a.checkpoint)?;
    let notes: Vec<Note> = read_jsonl(&a.notes)?;
    let table = build_table(&ckpt.state.model, &notes, &ckpt.vocab, modality, thread_count()?)?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    table.save(&a.out)?;
    m.inputs = vec![a.checkpoint.clone(), a.notes.clone()];
    m.outputs = vec![a.out.clone()];
    m.details = serde_json::json!({
        "checkpoint_sha256": file_sha256(&a.checkpoint)?,
        "mode": ckpt.state.model.mode(),
        "modality": modality.name(),
        "rows": table.len(),
        "dim": table.dim(),
    });
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    m.write(&a.out.with_file_name(name))
}

fn query(a: QueryArgs) -> Result<()> {
    let table = EmbeddingTable::load(&a.table)?;
    let hits = topk(&table, a.note_id, a.k)?;
    let mut out = std::io::stdout().lock();
    for (id, score) in hits {
        writeln!(out, "{id}\t{score:.6}")?;
    }
    Ok(())
}
