mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chunkstack::aggregator::AggregatorKind;
use chunkstack::baselines::{bow_baseline, truncation_baseline, BowConfig};
use chunkstack::checkpoint;
use chunkstack::data::{check_labels, load_corpus, prepare, Record};
use chunkstack::metrics::{argmax, evaluate};
use chunkstack::model::{grad_check_model, tiny_config, HierModel, ModelConfig, WordPool};
use chunkstack::synth::{self, SignalKind, SynthSpec};
use chunkstack::tensor::{DType, Element};
use chunkstack::tokenizer::{build_vocab, Vocabulary};
use chunkstack::train::{downsample_balance, train, StepLog, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use settings::Settings;

#[derive(Parser)]
#[command(name = "chunkstack", version, about = "Hierarchical transformer classifier for long documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a whole-word vocabulary from a corpus.
    VocabBuild {
        #[arg(long)]
        corpus: PathBuf,
        /// Total size including the reserved tokens.
        #[arg(long, default_value_t = 30000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus (train.jsonl, test.jsonl, spec.json).
    Synth(SynthArgs),
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        data: TrainData,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out: PathBuf,
        /// Print the resolved settings and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a trained run on a labelled corpus; prints one JSON line.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print a key-value block instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Print `id<TAB>label<TAB>probabilities` per document.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on the tiny model.
    Gradcheck {
        #[arg(long, default_value = "f64")]
        dtype: DType,
        /// Use the tiny configuration (the only one supported).
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        word_pool: Option<WordPool>,
        #[arg(long)]
        aggregator: Option<AggregatorKind>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train and score a comparison baseline; prints one JSON line.
    Baseline {
        #[arg(long, value_parser = ["truncation", "bow"])]
        kind: String,
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value_t = BowConfig::default().l2)]
        l2: f64,
        #[arg(long, default_value_t = BowConfig::default().steps)]
        bow_steps: usize,
        #[arg(long, default_value_t = BowConfig::default().lr)]
        bow_lr: f64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = ["long-range-pair", "keyword-anywhere"], default_value = "long-range-pair")]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
    #[arg(long, default_value_t = 250)]
    doc_len: usize,
    #[arg(long, default_value_t = 20)]
    doc_jitter: usize,
    #[arg(long, default_value_t = 2)]
    n_class: usize,
    #[arg(long, default_value_t = 202)]
    signal_offset: usize,
    #[arg(long, default_value_t = 202)]
    first_chunk: usize,
    /// Restrict keyword triggers to token positions `start,end`.
    #[arg(long, value_parser = parse_window)]
    plant_window: Option<(usize, usize)>,
    /// Copies of each planted trigger.
    #[arg(long, default_value_t = 20)]
    trigger_repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected start,end")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    train: PathBuf,
    /// Vocabulary file; built from the training corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 30000)]
    vocab_size: usize,
}

/// Every flag maps to a settings key of the same name.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long, value_parser = ["finetune", "frozen"], default_value = "finetune")]
    preset: String,
    /// key=value lines applied after the preset and before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    grad_accum_steps: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    warmup_steps: Option<String>,
    #[arg(long, value_parser = ["finetune", "frozen"])]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[arg(long, value_parser = ["cls", "wsum"])]
    word_pool: Option<String>,
    #[arg(long, value_parser = ["transformer", "transformer-pos", "lstm", "cnn", "mean"])]
    aggregator: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    linear_decay: Option<String>,
    #[arg(long)]
    content_len: Option<String>,
    #[arg(long)]
    max_chunks: Option<String>,
    #[arg(long)]
    n_class: Option<String>,
    #[arg(long, value_parser = ["desk", "full"])]
    model: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    ff_inner: Option<String>,
    #[arg(long)]
    init_std: Option<String>,
    #[arg(long)]
    chunk_layers: Option<String>,
    #[arg(long)]
    chunk_heads: Option<String>,
    #[arg(long)]
    chunk_key_dim: Option<String>,
    #[arg(long)]
    chunk_ff_inner: Option<String>,
    #[arg(long)]
    downsample: Option<String>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<Settings> {
        let mut s = Settings::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            s.apply_file(&text, &path.display().to_string())?;
        }
        for (key, value) in [
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("grad_accum_steps", &self.grad_accum_steps),
            ("epochs", &self.epochs),
            ("warmup_steps", &self.warmup_steps),
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("dtype", &self.dtype),
            ("word_pool", &self.word_pool),
            ("aggregator", &self.aggregator),
            ("dropout", &self.dropout),
            ("linear_decay", &self.linear_decay),
            ("content_len", &self.content_len),
            ("max_chunks", &self.max_chunks),
            ("n_class", &self.n_class),
            ("model", &self.model),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("ff_inner", &self.ff_inner),
            ("init_std", &self.init_std),
            ("chunk_layers", &self.chunk_layers),
            ("chunk_heads", &self.chunk_heads),
            ("chunk_key_dim", &self.chunk_key_dim),
            ("chunk_ff_inner", &self.chunk_ff_inner),
            ("downsample", &self.downsample),
        ] {
            if let Some(v) = value {
                s.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        Ok(s)
    }
}

/// Stored next to the checkpoint so a run can be reloaded without flags.
#[derive(Serialize, Deserialize)]
struct RunModel {
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    /// SHA-256 over `blob <len>\0<bytes>`, as git object ids are formed.
    blob_sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    settings: std::collections::BTreeMap<String, String>,
    seed: u64,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    n_train_records: usize,
    steps: usize,
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn hash_input(path: &Path) -> Result<InputHash> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputHash {
        path: path.display().to_string(),
        blob_sha256: blob_hash(&bytes),
    })
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    Ok(load_corpus(path)?)
}

fn load_or_build_vocab(data: &TrainData, records: &[Record]) -> Result<Vocabulary> {
    match &data.vocab {
        Some(p) => Ok(Vocabulary::load(p)?),
        None => {
            let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            Ok(build_vocab(&texts, data.vocab_size)?)
        }
    }
}

fn train_records(data: &TrainData, settings: &Settings, cfg: &TrainConfig) -> Result<Vec<Record>> {
    let records = load_records(&data.train)?;
    check_labels(&records, settings.n_class()?)?;
    if settings.downsample()? {
        Ok(downsample_balance(&records, settings.n_class()?, cfg.seed)?)
    } else {
        Ok(records)
    }
}

fn run_train<T: Element>(
    model_cfg: ModelConfig,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<StepLog>> {
    let docs = prepare(records, vocab, &model_cfg.chunking)?;
    let model = HierModel::<T>::new(model_cfg, cfg.seed)?;
    let steps_per_epoch = cfg.steps_per_epoch(docs.len());
    let mut epoch_loss = 0.0;
    let (model, log) = train(model, &docs, cfg, |s| {
        epoch_loss += s.loss;
        if s.step % steps_per_epoch == 0 {
            eprintln!("epoch {} step {} mean_loss {:.6}", s.epoch, s.step, epoch_loss / steps_per_epoch as f64);
            epoch_loss = 0.0;
        }
    })?;
    checkpoint::save(&out.join("model.ckpt"), model.params())?;
    Ok(log)
}

fn cmd_train(data: &TrainData, flags: &TrainFlags, out: &Path, dry_run: bool) -> Result<()> {
    let settings = flags.resolve()?;
    let cfg = settings.train_config()?;
    println!("config {}", settings.echo());
    if dry_run {
        return Ok(());
    }
    let records = train_records(data, &settings, &cfg)?;
    if records.is_empty() {
        bail!("training corpus {} is empty", data.train.display());
    }
    let vocab = load_or_build_vocab(data, &records)?;
    let model_cfg = settings.model_config(vocab.len())?;
    fs::create_dir_all(out)?;
    let log = match cfg.dtype {
        DType::F32 => run_train::<f32>(model_cfg.clone(), &records, &vocab, &cfg, out)?,
        DType::F64 => run_train::<f64>(model_cfg.clone(), &records, &vocab, &cfg, out)?,
    };
    vocab.save(&out.join("vocab.txt"))?;
    let run = RunModel {
        dtype: cfg.dtype,
        model: model_cfg,
        train: cfg.clone(),
    };
    fs::write(out.join("model.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    let mut tsv = String::from("step\tepoch\tlr\tloss\n");
    for s in &log {
        tsv.push_str(&format!("{}\t{}\t{:e}\t{}\n", s.step, s.epoch, s.lr, s.loss));
    }
    fs::write(out.join("train_log.tsv"), tsv)?;
    let mut inputs = vec![hash_input(&data.train)?];
    if let Some(v) = &data.vocab {
        inputs.push(hash_input(v)?);
    }
    if let Some(c) = &flags.config {
        inputs.push(hash_input(c)?);
    }
    let manifest = Manifest {
        settings: settings.as_map().clone(),
        seed: cfg.seed,
        inputs,
        outputs: ["model.ckpt", "model.json", "vocab.txt", "train_log.tsv", "manifest.json"]
            .iter()
            .map(|f| out.join(f).display().to_string())
            .collect(),
        n_train_records: records.len(),
        steps: log.len(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if let Some(last) = log.last() {
        println!("trained steps={} final_loss={:.6} out={}", last.step, last.loss, out.display());
    }
    Ok(())
}

struct LoadedRun<T: Element> {
    model: HierModel<T>,
    vocab: Vocabulary,
}

fn load_run<T: Element>(run: &Path, cfg: ModelConfig) -> Result<LoadedRun<T>> {
    let params = checkpoint::load::<T>(&run.join("model.ckpt"))?;
    Ok(LoadedRun {
        model: HierModel::from_params(cfg, params)?,
        vocab: Vocabulary::load(&run.join("vocab.txt"))?,
    })
}

fn read_run_model(run: &Path) -> Result<RunModel> {
    let path = run.join("model.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn eval_run<T: Element>(run: &Path, cfg: ModelConfig, data: &Path, text: bool) -> Result<()> {
    let loaded = load_run::<T>(run, cfg)?;
    let records = load_records(data)?;
    check_labels(&records, loaded.model.config().n_class)?;
    let docs = prepare(&records, &loaded.vocab, &loaded.model.config().chunking)?;
    let report = evaluate(&loaded.model, &docs)?;
    if text {
        print!("{}", report.to_text());
    } else {
        println!("{}", report.to_json_line());
    }
    Ok(())
}

fn predict_run<T: Element>(run: &Path, cfg: ModelConfig, data: &Path) -> Result<()> {
    let loaded = load_run::<T>(run, cfg)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in load_records(data)? {
        let doc = chunkstack::chunker::chunk(
            &chunkstack::tokenizer::encode(&r.text, &loaded.vocab),
            &loaded.model.config().chunking,
        )?;
        let p = loaded.model.predict_proba(&doc)?;
        let probs: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}\t{}\t{}", r.id, argmax(&p), probs.join(","))?;
    }
    Ok(())
}

fn cmd_gradcheck(
    dtype: DType,
    tiny: bool,
    pool: Option<WordPool>,
    agg: Option<AggregatorKind>,
    tol: f64,
    step: f64,
) -> Result<()> {
    if dtype != DType::F64 {
        bail!("gradcheck needs --dtype f64; f32 finite differences are too coarse");
    }
    if !tiny {
        bail!("gradcheck runs on the tiny configuration only; pass --tiny");
    }
    let pools = pool.map_or(vec![WordPool::Cls, WordPool::WeightedSum], |p| vec![p]);
    let aggs = agg.map_or(AggregatorKind::ALL.to_vec(), |a| vec![a]);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for &p in &pools {
        for &a in &aggs {
            let cfg = tiny_config(20, 3, p, a);
            let ids: Vec<u32> = (0..16).map(|i| 3 + ((i * 7 + 2) % 17) as u32).collect();
            let doc = chunkstack::chunker::chunk(&ids, &cfg.chunking)?;
            let model = HierModel::<f64>::new(cfg, 3)?;
            let report = grad_check_model(&model, &doc, 1, step, tol)?;
            println!(
                "variant={}/{} params={} max_rel_err={:.3e} {}",
                p.name(),
                a.name(),
                report.checked,
                report.max_rel_err,
                if report.passed() { "pass" } else { "FAIL" }
            );
            worst = worst.max(report.max_rel_err);
            if !report.passed() {
                failed.push(format!("{}/{}", p.name(), a.name()));
            }
        }
    }
    println!("max_rel_err={worst:.3e} tol={tol:e}");
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_baseline(kind: &str, data: &TrainData, test: &Path, flags: &TrainFlags, bow: BowConfig) -> Result<()> {
    let settings = flags.resolve()?;
    let cfg = settings.train_config()?;
    let train_set = train_records(data, &settings, &cfg)?;
    let test_set = load_records(test)?;
    let n_class = settings.n_class()?;
    check_labels(&test_set, n_class)?;
    let vocab = load_or_build_vocab(data, &train_set)?;
    let report = match kind {
        "bow" => bow_baseline(&train_set, &test_set, &vocab, n_class, &bow)?,
        _ => {
            let model_cfg = settings.model_config(vocab.len())?;
            match cfg.dtype {
                DType::F32 => truncation_baseline::<f32>(&train_set, &test_set, &vocab, &model_cfg, &cfg)?,
                DType::F64 => truncation_baseline::<f64>(&train_set, &test_set, &vocab, &model_cfg, &cfg)?,
            }
        }
    };
    println!("{}", report.to_json_line());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_train: a.n_train,
        n_test: a.n_test,
        vocab_size: a.vocab_size,
        doc_len_mean: a.doc_len,
        doc_len_jitter: a.doc_jitter,
        n_class: a.n_class,
        signal_kind: if a.kind == "keyword-anywhere" {
            SignalKind::KeywordAnywhere
        } else {
            SignalKind::LongRangePair
        },
        signal_offset_tokens: a.signal_offset,
        first_chunk_tokens: a.first_chunk,
        plant_window: a.plant_window,
        trigger_repeats: a.trigger_repeats,
        seed: a.seed,
    };
    synth::write(&spec, &a.out)?;
    println!("wrote {} train and {} test records to {}", spec.n_train, spec.n_test, a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VocabBuild { corpus, size, out } => {
            let records = load_records(&corpus)?;
            let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            let vocab = build_vocab(&texts, size)?;
            vocab.save(&out)?;
            println!("vocab_size={} out={}", vocab.len(), out.display());
            Ok(())
        }
        Command::Synth(a) => cmd_synth(&a),
        Command::Train {
            data,
            flags,
            out,
            dry_run,
        } => cmd_train(&data, &flags, &out, dry_run),
        Command::Eval { run, data, text } => {
            let rm = read_run_model(&run)?;
            match rm.dtype {
                DType::F32 => eval_run::<f32>(&run, rm.model, &data, text),
                DType::F64 => eval_run::<f64>(&run, rm.model, &data, text),
            }
        }
        Command::Predict { run, data } => {
            let rm = read_run_model(&run)?;
            match rm.dtype {
                DType::F32 => predict_run::<f32>(&run, rm.model, &data),
                DType::F64 => predict_run::<f64>(&run, rm.model, &data),
            }
        }
        Command::Gradcheck {
            dtype,
            tiny,
            word_pool,
            aggregator,
            tol,
            step,
        } => cmd_gradcheck(dtype, tiny, word_pool, aggregator, tol, step),
        Command::Baseline {
            kind,
            data,
            test,
            flags,
            l2,
            bow_steps,
            bow_lr,
        } => cmd_baseline(
            &kind,
            &data,
            &test,
            &flags,
            BowConfig {
                l2,
                lr: bow_lr,
                steps: bow_steps,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::from(1)
        }
    }
}
