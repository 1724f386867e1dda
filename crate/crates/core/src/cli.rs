//! Command-line entry point wiring config, data, training, and evaluation
//! into reproducible runs. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numeric failure (non-finite loss or a failed gradient check).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, JobConfig};
use crate::data::{self, Corpus, DataError, SyntheticSpec};
use crate::encoders::load_pretrained_embeddings;
use crate::evaluation::{
    encode_split, evaluate_sts, format_reports, head_diversity_report, retrieval_reports,
    validation_score, EvalError,
};
use crate::model::{gradcheck_model, synthetic_gradcheck_batch, Lang, ModelParams};
use crate::objectives::LossBreakdown;
use crate::training::{self, TrainError};

#[derive(Parser)]
#[command(name = "vsediv", version, about = "Multilingual visual-semantic embeddings with diversity-regularized multi-head attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts and the resolved-config snapshot.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation shard count.
    #[arg(long)]
    threads: Option<usize>,
    /// Diversity hinge form: literal | intent.
    #[arg(long = "diversity-mode", value_name = "MODE")]
    diversity_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train(Common),
    /// Four-direction retrieval recall over a split.
    EvalRetrieval(Common),
    /// Sentence-pair similarity with Pearson correlation.
    EvalSts(Common),
    /// Finite-difference gradient check of the full objective.
    Gradcheck(Common),
    /// Generate the synthetic bilingual corpus files.
    SynthGen(Common),
    /// Dump per-instance embeddings, heads, and attention weights.
    ExportEmbeddings(Common),
    /// Mean inter-head cosine per stream.
    DiversityReport(Common),
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroVariance => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    let (common, result) = match &cli.command {
        Command::Train(c) => (c, resolve(c).and_then(|j| cmd_train(c, &j))),
        Command::EvalRetrieval(c) => (c, resolve(c).and_then(|j| cmd_eval_retrieval(c, &j))),
        Command::EvalSts(c) => (c, resolve(c).and_then(|j| cmd_eval_sts(c, &j))),
        Command::Gradcheck(c) => (c, resolve(c).and_then(|j| cmd_gradcheck(c, &j))),
        Command::SynthGen(c) => (c, resolve(c).and_then(|j| cmd_synth_gen(c, &j))),
        Command::ExportEmbeddings(c) => (c, resolve(c).and_then(|j| cmd_export(c, &j))),
        Command::DiversityReport(c) => (c, resolve(c).and_then(|j| cmd_diversity(c, &j))),
    };
    let _ = common;
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Parse config file + overrides and write the resolved snapshot.
fn resolve(common: &Common) -> CliResult<JobConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?,
        None => String::new(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects key=value, got '{kv}'"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(threads) = common.threads {
        overrides.push(("threads".into(), threads.to_string()));
    }
    if let Some(mode) = &common.diversity_mode {
        overrides.push(("diversity_mode".into(), mode.clone()));
    }
    let job = JobConfig::parse(&text, &overrides)?;

    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", common.out.display())))?;
    let snap_path = common.out.join("resolved.cfg");
    std::fs::write(&snap_path, job.snapshot())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", snap_path.display())))?;
    Ok(job)
}

fn require<'a>(field: &'a Option<String>, key: &str) -> CliResult<&'a Path> {
    field
        .as_deref()
        .map(Path::new)
        .ok_or_else(|| CliError::Usage(format!("config key '{key}' is required")))
}

fn load_corpus(job: &JobConfig) -> CliResult<Corpus> {
    Ok(data::load_corpus(
        require(&job.features, "features")?,
        require(&job.captions_a, "captions_a")?,
        require(&job.captions_b, "captions_b")?,
        require(&job.split_train, "split_train")?,
        require(&job.split_val, "split_val")?,
        require(&job.split_test, "split_test")?,
        job.run.max_len,
    )?)
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(common: &Common, job: &JobConfig) -> CliResult<()> {
    let corpus = load_corpus(job)?;
    let cfg = &job.run;
    let (vocab_a, vocab_b) = training::build_vocabs(&corpus, cfg.min_count);
    let mut params = ModelParams::init(cfg, vocab_a.len(), vocab_b.len(), cfg.seed);

    for (key, path, vocab, table) in [
        ("a", &job.pretrained_a, &vocab_a, &mut params.text_a),
        ("b", &job.pretrained_b, &vocab_b, &mut params.text_b),
    ] {
        if let Some(path) = path {
            let load = load_pretrained_embeddings(Path::new(path), vocab, cfg.d_w)
                .map_err(CliError::Data)?;
            crate::encoders::apply_pretrained(&mut table.embedding, &load);
            println!(
                "pretrained embeddings ({key}): {:.1}% coverage",
                100.0 * load.coverage
            );
        }
    }

    let log_path = common.out.join("train_log.csv");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", log_path.display())))?;
    writeln!(log_file, "{}", LossBreakdown::CSV_HEADER)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let outcome = training::train_from(cfg, &corpus, params, vocab_a, vocab_b, |row| {
        let _ = writeln!(log_file, "{}", row.csv());
    })?;

    let mut val_csv = String::from("epoch,direction,r1,r5,r10,median_rank,score_sum\n");
    for val in &outcome.validations {
        for r in &val.reports {
            val_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                val.epoch,
                r.direction.label(),
                r.recall[0],
                r.recall[1],
                r.recall[2],
                r.median_rank,
                val.score
            ));
        }
    }
    write_file(&common.out.join("validation.csv"), &val_csv)?;

    checkpoint::save(&outcome.best, &common.out.join("checkpoint.ckpt"))?;
    checkpoint::save(&outcome.last, &common.out.join("last.ckpt"))?;

    println!(
        "trained {} epochs, {} steps; best validation score {:.2} at epoch {}",
        cfg.epochs,
        outcome.log.len(),
        outcome.best.val_score,
        outcome.best.epoch
    );
    println!("checkpoint: {}", common.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn load_checkpoint(job: &JobConfig) -> CliResult<training::Checkpoint> {
    let path = require(&job.checkpoint, "checkpoint")?;
    Ok(checkpoint::load(path)?)
}

fn cmd_eval_retrieval(common: &Common, job: &JobConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(job)?;
    let corpus = load_corpus(job)?;
    let split = encode_split(
        &ckpt.params,
        &corpus,
        &job.eval_split,
        &ckpt.vocab_a,
        &ckpt.vocab_b,
        ckpt.cfg.max_objects,
    )?;
    let reports = retrieval_reports(&split, &[1, 5, 10], job.threads)?;

    let mut csv = String::from("direction,k1,r1,k5,r5,k10,r10,median_rank\n");
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&common.out.join("retrieval.csv"), &csv)?;
    print!("{}", format_reports(&reports));
    println!("score sum: {:.2}", validation_score(&reports));
    Ok(())
}

fn cmd_eval_sts(common: &Common, job: &JobConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(job)?;
    let pairs = data::load_sts(require(&job.sts, "sts")?, ckpt.cfg.max_len)?;
    let (vocab, lang) = if job.sts_lang == "a" {
        (&ckpt.vocab_a, Lang::A)
    } else {
        (&ckpt.vocab_b, Lang::B)
    };
    let report = evaluate_sts(&ckpt.params, &pairs, vocab, lang)?;

    let mut csv = String::from("prediction,gold\n");
    for (p, pair) in report.predictions.iter().zip(&pairs) {
        csv.push_str(&format!("{p},{}\n", pair.gold));
    }
    write_file(&common.out.join("sts.csv"), &csv)?;
    println!("pairs: {}", pairs.len());
    println!("pearson r: {:.6}", report.pearson_r);
    Ok(())
}

fn cmd_gradcheck(common: &Common, job: &JobConfig) -> CliResult<()> {
    let cfg = &job.run;
    let (vocab_a, vocab_b) = (13usize, 17usize);
    let mut params = ModelParams::init(cfg, vocab_a, vocab_b, cfg.seed);
    let batch = synthetic_gradcheck_batch(
        cfg,
        vocab_a,
        vocab_b,
        job.gc_batch.max(2),
        job.gc_len.max(2),
        cfg.seed.wrapping_add(1),
    );
    let check = gradcheck_model(
        &mut params,
        &batch,
        &cfg.loss(),
        cfg.max_objects,
        job.gc_probes,
        job.gc_h,
        cfg.seed.wrapping_add(2),
    )?;
    let report = format!(
        "loss {:.6}\nprobes {}\nmax relative error {:.3e}\nworst parameter {}\ntolerance {:.1e}\n",
        check.loss,
        check.report.n_probes,
        check.report.max_rel_err,
        check.worst_param.as_deref().unwrap_or("-"),
        job.gc_tol,
    );
    write_file(&common.out.join("gradcheck.txt"), &report)?;
    print!("{report}");
    if !check.report.passes(job.gc_tol) {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            check.report.max_rel_err, job.gc_tol
        )));
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_synth_gen(common: &Common, job: &JobConfig) -> CliResult<()> {
    let spec = SyntheticSpec {
        n_concepts: job.synth_concepts,
        n_images: job.synth_images,
        objects_per_image: job.synth_objects,
        vocab_per_language: job.synth_vocab,
        captions_per_image: job.synth_captions,
        noise: job.synth_noise,
        d_v: job.synth_d_v,
        seed: job.synth_seed,
    };
    let corpus = data::generate_synthetic(&spec)?;
    data::write_corpus(&corpus, &common.out)?;
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        corpus.images.len(),
        corpus.splits.train.len(),
        corpus.splits.val.len(),
        corpus.splits.test.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_export(common: &Common, job: &JobConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(job)?;
    let corpus = load_corpus(job)?;
    let split = encode_split(
        &ckpt.params,
        &corpus,
        &job.eval_split,
        &ckpt.vocab_a,
        &ckpt.vocab_b,
        ckpt.cfg.max_objects,
    )?;
    let path = common.out.join("embeddings.tsv");
    let mut file = std::fs::File::create(&path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    crate::evaluation::export_embeddings(&split, &mut file)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "wrote {} records to {}",
        split.images.len() + split.captions_a.len() + split.captions_b.len(),
        path.display()
    );
    Ok(())
}

fn cmd_diversity(common: &Common, job: &JobConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(job)?;
    let corpus = load_corpus(job)?;
    let split = encode_split(
        &ckpt.params,
        &corpus,
        &job.eval_split,
        &ckpt.vocab_a,
        &ckpt.vocab_b,
        ckpt.cfg.max_objects,
    )?;
    let report = head_diversity_report(&split)?;
    let csv = format!(
        "stream,mean_interhead_cosine\nV,{}\nE,{}\nG,{}\n",
        report.visual, report.lang_a, report.lang_b
    );
    write_file(&common.out.join("diversity.csv"), &csv)?;
    println!("mean inter-head cosine:");
    println!("  images     {:.6}", report.visual);
    println!("  language A {:.6}", report.lang_a);
    println!("  language B {:.6}", report.lang_b);
    Ok(())
}
