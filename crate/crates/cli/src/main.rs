//! Command-line pipeline: train, induce tags, parse, evaluate, generate
//! synthetic corpora, and export latent embeddings.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flowsyn::data::{self, Corpus, EmbeddingTable, UnkPolicy};
use flowsyn::eval::{directed_accuracy, ContingencyTable};
use flowsyn::joint::{JointModel, LengthDist};
use flowsyn::optim::{
    self, Checkpoint, InitMode, RestartRecord, Structure, TrainConfig, TrainEvent,
};
use flowsyn::Real;

#[derive(Parser)]
#[command(
    name = "flowsyn",
    about = "Joint unsupervised induction of syntactic structure and latent word embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (optionally with the two-stage pre-training pipeline).
    Train(TrainArgs),
    /// Decode 1-best tag sequences with a Markov checkpoint.
    InduceTags(DecodeArgs),
    /// Decode 1-best dependency parses with a DMV checkpoint.
    Parse(DecodeArgs),
    /// Score predictions against gold annotations.
    Eval(EvalArgs),
    /// Sample a synthetic corpus from a checkpoint or a model spec.
    Generate(GenerateArgs),
    /// Write the inverse projection of every corpus token type.
    ExportLatent(ExportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Debug)]
#[serde(rename_all = "lowercase")]
enum StructureArg {
    Markov,
    Dmv,
}

impl From<StructureArg> for Structure {
    fn from(v: StructureArg) -> Structure {
        match v {
            StructureArg::Markov => Structure::Markov,
            StructureArg::Dmv => Structure::Dmv,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Debug)]
#[serde(rename_all = "lowercase")]
enum UnkPolicyArg {
    Mean,
    Error,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional TOML config file; command-line flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    structure: Option<StructureArg>,
    /// Number of latent states / tags.
    #[arg(long)]
    k: Option<usize>,
    /// Number of coupling layers (0 = Gaussian baseline).
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Tokens file, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Optional gold tags file (validated, not used in training).
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Optional gold heads file (validated, not used in training).
    #[arg(long)]
    heads: Option<PathBuf>,
    /// "none", "auto" (two-stage pipeline), or a checkpoint path.
    #[arg(long)]
    pretrain: Option<String>,
    /// Markov checkpoint used to induce tags for the discrete Viterbi-EM
    /// initializer (DMV + --pretrain auto only).
    #[arg(long)]
    tag_model: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(bool))]
    fixed_variance: Option<bool>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(bool))]
    strip_punct: Option<bool>,
    /// Comma-separated punctuation tokens overriding the default set.
    #[arg(long)]
    punct_tokens: Option<String>,
    /// Early-stop threshold on relative epoch-likelihood improvement.
    #[arg(long)]
    converge_tol: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(bool))]
    parallel: Option<bool>,
    #[arg(long)]
    expected_dim: Option<usize>,
    #[arg(long, value_enum)]
    unk_policy: Option<UnkPolicyArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// TOML mirror of the training flags. Unknown keys are rejected.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    structure: Option<StructureArg>,
    k: Option<usize>,
    depth: Option<usize>,
    epochs: Option<usize>,
    restarts: Option<usize>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    embeddings: Option<PathBuf>,
    corpus: Option<PathBuf>,
    tags: Option<PathBuf>,
    heads: Option<PathBuf>,
    pretrain: Option<String>,
    tag_model: Option<PathBuf>,
    fixed_variance: Option<bool>,
    max_len: Option<usize>,
    strip_punct: Option<bool>,
    punct_tokens: Option<String>,
    converge_tol: Option<f64>,
    parallel: Option<bool>,
    expected_dim: Option<usize>,
    unk_policy: Option<UnkPolicyArg>,
    out: Option<PathBuf>,
}

/// Every value a training run actually uses, emitted for reproducibility.
#[derive(Serialize)]
struct ResolvedTrainConfig {
    structure: StructureArg,
    k: usize,
    depth: usize,
    epochs: usize,
    restarts: usize,
    seed: u64,
    batch_size: usize,
    learning_rate: f64,
    embeddings: String,
    corpus: String,
    tags: Option<String>,
    heads: Option<String>,
    pretrain: String,
    tag_model: Option<String>,
    fixed_variance: bool,
    max_len: Option<usize>,
    strip_punct: bool,
    punct_tokens: Option<String>,
    converge_tol: Option<f64>,
    parallel: bool,
    expected_dim: Option<usize>,
    unk_policy: UnkPolicyArg,
    out: String,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    expected_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "mean")]
    unk_policy: UnkPolicyArg,
    /// Output file (tag or head lines, parallel to the corpus).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Debug)]
enum EvalTask {
    Pos,
    Parse,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Predicted tags (pos) or heads (parse), one sentence per line.
    #[arg(long)]
    pred: PathBuf,
    /// Gold tags (pos) or heads (parse), one sentence per line.
    #[arg(long)]
    gold: PathBuf,
    /// Restrict the confusion matrix to these gold tags (comma separated).
    #[arg(long)]
    confusion_tags: Option<String>,
    /// Directory for metrics.json and confusion.csv (pos task).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Sample from a trained checkpoint...
    #[arg(long, conflicts_with = "spec")]
    checkpoint: Option<PathBuf>,
    /// ...or from a JSON model spec {"model": ..., "min_len": ..., "max_len": ...}.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the sampled sentence-length window.
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// JSON model spec accepted by `generate --spec`.
#[derive(Serialize, Deserialize)]
struct GenSpec {
    model: JointModel<Real>,
    min_len: usize,
    max_len: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    expected_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "mean")]
    unk_policy: UnkPolicyArg,
    #[arg(long)]
    out: PathBuf,
}

/// A bad invocation (missing/contradictory flags), exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::InduceTags(args) => cmd_decode(args, DecodeKind::Tags),
        Command::Parse(args) => cmd_decode(args, DecodeKind::Heads),
        Command::Eval(args) => cmd_eval(args),
        Command::Generate(args) => cmd_generate(args),
        Command::ExportLatent(args) => cmd_export_latent(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_table(
    path: &Path,
    expected_dim: Option<usize>,
    unk: UnkPolicyArg,
) -> anyhow::Result<EmbeddingTable<Real>> {
    let mut table = EmbeddingTable::load(path, expected_dim)
        .with_context(|| format!("loading embeddings from {}", path.display()))?;
    table.unk_policy = match unk {
        UnkPolicyArg::Mean => UnkPolicy::MeanVector,
        UnkPolicyArg::Error => UnkPolicy::Error,
    };
    Ok(table)
}

fn parse_punct(option: &Option<String>) -> HashSet<String> {
    match option {
        None => data::default_punct_set(),
        Some(s) => s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let file_cfg: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
    };
    // Flags override config-file keys; hard defaults fill the rest.
    let structure = args.structure.or(file_cfg.structure).unwrap_or(StructureArg::Markov);
    let resolved = ResolvedTrainConfig {
        structure,
        k: args.k.or(file_cfg.k).unwrap_or(45),
        depth: args.depth.or(file_cfg.depth).unwrap_or(0),
        epochs: args.epochs.or(file_cfg.epochs).unwrap_or(50),
        restarts: args.restarts.or(file_cfg.restarts).unwrap_or(1),
        seed: args.seed.or(file_cfg.seed).unwrap_or(0),
        batch_size: args.batch_size.or(file_cfg.batch_size).unwrap_or(32),
        learning_rate: args.learning_rate.or(file_cfg.learning_rate).unwrap_or(1e-3),
        embeddings: args
            .embeddings
            .or(file_cfg.embeddings)
            .ok_or_else(|| usage("--embeddings is required"))?
            .display()
            .to_string(),
        corpus: args
            .corpus
            .or(file_cfg.corpus)
            .ok_or_else(|| usage("--corpus is required"))?
            .display()
            .to_string(),
        tags: args.tags.or(file_cfg.tags).map(|p| p.display().to_string()),
        heads: args.heads.or(file_cfg.heads).map(|p| p.display().to_string()),
        pretrain: args.pretrain.or(file_cfg.pretrain).unwrap_or_else(|| "none".to_string()),
        tag_model: args.tag_model.or(file_cfg.tag_model).map(|p| p.display().to_string()),
        fixed_variance: args.fixed_variance.or(file_cfg.fixed_variance).unwrap_or(true),
        max_len: args.max_len.or(file_cfg.max_len),
        strip_punct: args.strip_punct.or(file_cfg.strip_punct).unwrap_or(false),
        punct_tokens: args.punct_tokens.or(file_cfg.punct_tokens),
        converge_tol: args.converge_tol.or(file_cfg.converge_tol),
        parallel: args.parallel.or(file_cfg.parallel).unwrap_or(false),
        expected_dim: args.expected_dim.or(file_cfg.expected_dim),
        unk_policy: args.unk_policy.or(file_cfg.unk_policy).unwrap_or(UnkPolicyArg::Mean),
        out: args
            .out
            .or(file_cfg.out)
            .ok_or_else(|| usage("--out is required"))?
            .display()
            .to_string(),
    };

    let out_dir = PathBuf::from(&resolved.out);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let resolved_toml = toml::to_string(&resolved).context("serializing resolved config")?;
    print!("# resolved configuration\n{resolved_toml}");
    fs::write(out_dir.join("resolved_config.toml"), &resolved_toml)?;

    let table = load_table(
        Path::new(&resolved.embeddings),
        resolved.expected_dim,
        resolved.unk_policy,
    )?;
    let mut corpus = data::load_corpus(
        Path::new(&resolved.corpus),
        &table,
        resolved.tags.as_deref().map(Path::new),
        resolved.heads.as_deref().map(Path::new),
    )?;
    if resolved.max_len.is_some() || resolved.strip_punct {
        corpus = data::filter_by_length(
            &corpus,
            resolved.max_len.unwrap_or(usize::MAX),
            resolved.strip_punct,
            &parse_punct(&resolved.punct_tokens),
        )?;
    }
    println!(
        "# corpus: {} sentences, {} tokens, dim {}",
        corpus.len(),
        corpus.total_tokens(),
        corpus.dim()
    );

    let mut config = TrainConfig::new(resolved.structure.into(), resolved.k);
    config.depth = resolved.depth;
    config.epochs = resolved.epochs;
    config.restarts = resolved.restarts;
    config.batch_size = resolved.batch_size;
    config.seed = resolved.seed;
    config.learning_rate = resolved.learning_rate;
    config.fixed_variance = resolved.fixed_variance;
    config.max_len = resolved.max_len;
    config.strip_punct = resolved.strip_punct;
    config.converge_tol = resolved.converge_tol;
    config.parallel = resolved.parallel;

    let log_path = out_dir.join("train_log.txt");
    let mut log_file = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let stdout = std::io::stdout();
    let mut sink = |e: &TrainEvent| {
        let line = format!(
            "restart={} epoch={} batch={} ll={:.6} grad_norm={:.6}",
            e.restart, e.epoch, e.batch, e.mean_ll, e.grad_norm
        );
        let _ = writeln!(log_file, "{line}");
        let _ = writeln!(stdout.lock(), "{line}");
    };

    let (best, records, stage1): (Checkpoint<Real>, Vec<RestartRecord>, Option<Checkpoint<Real>>) =
        match resolved.pretrain.as_str() {
            "none" => {
                let (ckpt, records) = optim::train(&corpus, &config, &mut sink)?;
                (ckpt, records, None)
            }
            "auto" => {
                let induced = match (&resolved.tag_model, config.structure) {
                    (Some(path), Structure::Dmv) => {
                        let tag_ckpt: Checkpoint<Real> =
                            optim::load_checkpoint(Path::new(path))?;
                        Some(induce_tag_ids(&tag_ckpt.model, &corpus)?)
                    }
                    _ => None,
                };
                let outcome =
                    optim::pretrain_pipeline(&corpus, &config, induced.as_deref(), &mut sink)?;
                optim::save_checkpoint(&outcome.stage1, &out_dir.join("stage1_checkpoint.json"))?;
                (outcome.best, outcome.records, Some(outcome.stage1))
            }
            path => {
                config.init_mode = InitMode::Pretrained(path.to_string());
                let (ckpt, records) = optim::train(&corpus, &config, &mut sink)?;
                (ckpt, records, None)
            }
        };

    optim::save_checkpoint(&best, &out_dir.join("checkpoint.json"))?;
    let mut table_out = String::from("restart\tseed\tfinal_ll\tstatus\n");
    for r in &records {
        table_out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.restart,
            r.seed,
            r.final_ll.map_or("-".to_string(), |v| format!("{v:.6}")),
            r.error.as_deref().unwrap_or("ok")
        ));
    }
    fs::write(out_dir.join("restarts.tsv"), &table_out)?;
    if let Some(s1) = &stage1 {
        println!("# stage1_ll={:.6}", s1.final_ll);
    }
    println!("# best_ll={:.6}", best.final_ll);
    println!("# checkpoint written to {}", out_dir.join("checkpoint.json").display());
    Ok(())
}

/// Viterbi tag ids for every corpus sentence under a Markov model.
fn induce_tag_ids(model: &JointModel<Real>, corpus: &Corpus<Real>) -> anyhow::Result<Vec<Vec<usize>>> {
    let markov = model.syntax.as_markov()?;
    let mut out = Vec::with_capacity(corpus.len());
    for sent in &corpus.sentences {
        let (scores, _) = model.emission_log_scores(&sent.embeddings)?;
        out.push(markov.viterbi(&scores)?);
    }
    Ok(out)
}

enum DecodeKind {
    Tags,
    Heads,
}

fn cmd_decode(args: DecodeArgs, kind: DecodeKind) -> anyhow::Result<()> {
    println!(
        "# resolved configuration\ncheckpoint = {:?}\nembeddings = {:?}\ncorpus = {:?}\nout = {:?}",
        args.checkpoint.display().to_string(),
        args.embeddings.display().to_string(),
        args.corpus.display().to_string(),
        args.out.display().to_string()
    );
    let ckpt: Checkpoint<Real> = optim::load_checkpoint(&args.checkpoint)?;
    let table = load_table(&args.embeddings, args.expected_dim, args.unk_policy)?;
    let corpus = data::load_corpus(&args.corpus, &table, None, None)?;
    let mut out = String::new();
    match kind {
        DecodeKind::Tags => {
            let markov = ckpt.model.syntax.as_markov()?;
            for sent in &corpus.sentences {
                let (scores, _) = ckpt.model.emission_log_scores(&sent.embeddings)?;
                let tags = markov.viterbi(&scores)?;
                let line: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        DecodeKind::Heads => {
            let dmv = ckpt.model.syntax.as_dmv()?;
            for sent in &corpus.sentences {
                let (scores, _) = ckpt.model.emission_log_scores(&sent.embeddings)?;
                let (parse, _) = dmv.viterbi(&scores)?;
                let line: Vec<String> = parse.heads.iter().map(|h| h.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("# wrote {}", args.out.display());
    Ok(())
}

fn read_token_lines(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    println!(
        "# resolved configuration\ntask = {:?}\npred = {:?}\ngold = {:?}",
        args.task,
        args.pred.display().to_string(),
        args.gold.display().to_string()
    );
    let pred_lines = read_token_lines(&args.pred)?;
    let gold_lines = read_token_lines(&args.gold)?;
    if pred_lines.len() != gold_lines.len() {
        bail!(
            "prediction and gold files disagree on sentence count ({} vs {})",
            pred_lines.len(),
            gold_lines.len()
        );
    }
    let mut report: Vec<(String, f64)> = Vec::new();
    match args.task {
        EvalTask::Pos => {
            let mut pred_ids: Vec<Vec<usize>> = Vec::new();
            let mut gold_ids: Vec<Vec<usize>> = Vec::new();
            let mut pred_names: Vec<String> = Vec::new();
            let mut gold_names: Vec<String> = Vec::new();
            let mut pred_index = std::collections::HashMap::new();
            let mut gold_index = std::collections::HashMap::new();
            for (p_line, g_line) in pred_lines.iter().zip(&gold_lines) {
                if p_line.len() != g_line.len() {
                    bail!("sentence length mismatch between prediction and gold");
                }
                let ps = p_line
                    .iter()
                    .map(|t| {
                        *pred_index.entry(t.clone()).or_insert_with(|| {
                            pred_names.push(t.clone());
                            pred_names.len() - 1
                        })
                    })
                    .collect();
                let gs = g_line
                    .iter()
                    .map(|t| {
                        *gold_index.entry(t.clone()).or_insert_with(|| {
                            gold_names.push(t.clone());
                            gold_names.len() - 1
                        })
                    })
                    .collect();
                pred_ids.push(ps);
                gold_ids.push(gs);
            }
            let table = ContingencyTable::from_sequences(
                pred_names.len(),
                gold_names.len(),
                &pred_ids,
                &gold_ids,
            )?;
            let m1 = table.many_to_one()?;
            let (vm, h, c) = table.v_measure()?;
            let map = table.one_to_one_map()?;
            let one = table.mapped_count(&map) as f64 / table.total() as f64;
            report.push(("many_to_one".into(), m1));
            report.push(("v_measure".into(), vm));
            report.push(("homogeneity".into(), h));
            report.push(("completeness".into(), c));
            report.push(("one_to_one".into(), one));

            let subset: Option<Vec<usize>> = match &args.confusion_tags {
                None => None,
                Some(spec) => Some(
                    spec.split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            gold_index
                                .get(t)
                                .copied()
                                .with_context(|| format!("unknown gold tag {t:?}"))
                        })
                        .collect::<anyhow::Result<_>>()?,
                ),
            };
            let (tags, rows) = table.confusion_matrix(&map, subset.as_deref())?;
            let mut csv = String::from("gold");
            for &t in &tags {
                csv.push(',');
                csv.push_str(&gold_names[t]);
            }
            csv.push('\n');
            for (i, &g) in tags.iter().enumerate() {
                csv.push_str(&gold_names[g]);
                for v in &rows[i] {
                    csv.push_str(&format!(",{v:.6}"));
                }
                csv.push('\n');
            }
            if let Some(out) = &args.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("confusion.csv"), &csv)?;
            }
        }
        EvalTask::Parse => {
            let parse_heads = |lines: &[Vec<String>], what: &str| -> anyhow::Result<Vec<Vec<usize>>> {
                lines
                    .iter()
                    .map(|l| {
                        l.iter()
                            .map(|t| {
                                t.parse::<usize>()
                                    .with_context(|| format!("non-integer head {t:?} in {what}"))
                            })
                            .collect()
                    })
                    .collect()
            };
            let pred = parse_heads(&pred_lines, "predictions")?;
            let gold = parse_heads(&gold_lines, "gold")?;
            let dda_all = directed_accuracy(&pred, &gold)?;
            let le10: Vec<usize> =
                (0..gold.len()).filter(|&i| gold[i].len() <= 10).collect();
            let dda_le10 = if le10.is_empty() {
                f64::NAN
            } else {
                let p: Vec<_> = le10.iter().map(|&i| pred[i].clone()).collect();
                let g: Vec<_> = le10.iter().map(|&i| gold[i].clone()).collect();
                directed_accuracy(&p, &g)?
            };
            report.push(("dda_le10".into(), dda_le10));
            report.push(("dda_all".into(), dda_all));
        }
    }
    for (k, v) in &report {
        println!("{k}={v:.6}");
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let json: serde_json::Map<String, serde_json::Value> = report
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    println!(
        "# resolved configuration\nn = {}\nseed = {}\nout = {:?}",
        args.n,
        args.seed,
        args.out.display().to_string()
    );
    let (model, mut min_len, mut max_len): (JointModel<Real>, usize, usize) =
        match (&args.checkpoint, &args.spec) {
            (Some(path), None) => {
                let ckpt: Checkpoint<Real> = optim::load_checkpoint(path)?;
                (ckpt.model, 1, 10)
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading spec {}", path.display()))?;
                let spec: GenSpec = serde_json::from_str(&text)
                    .with_context(|| format!("parsing spec {}", path.display()))?;
                (spec.model, spec.min_len, spec.max_len)
            }
            _ => return Err(usage("exactly one of --checkpoint or --spec is required")),
        };
    if let Some(v) = args.min_len {
        min_len = v;
    }
    if let Some(v) = args.max_len {
        max_len = v;
    }
    let corpus = model.sample_corpus(args.n, LengthDist::Uniform { min: min_len, max: max_len }, args.seed)?;

    fs::create_dir_all(&args.out)?;
    let mut tokens = String::new();
    let mut tags = String::new();
    let mut heads = String::new();
    let mut embeddings = String::new();
    let mut any_heads = false;
    for sent in &corpus.sentences {
        tokens.push_str(&sent.tokens.join(" "));
        tokens.push('\n');
        if let Some(ts) = &sent.gold_tags {
            tags.push_str(&ts.join(" "));
            tags.push('\n');
        }
        if let Some(hs) = &sent.gold_heads {
            any_heads = true;
            let line: Vec<String> = hs.iter().map(|h| h.to_string()).collect();
            heads.push_str(&line.join(" "));
            heads.push('\n');
        }
        for (i, tok) in sent.tokens.iter().enumerate() {
            embeddings.push_str(tok);
            for v in sent.embeddings.row(i) {
                embeddings.push_str(&format!(" {v}"));
            }
            embeddings.push('\n');
        }
    }
    fs::write(args.out.join("tokens.txt"), tokens)?;
    fs::write(args.out.join("tags.txt"), tags)?;
    if any_heads {
        fs::write(args.out.join("heads.txt"), heads)?;
    }
    fs::write(args.out.join("embeddings.txt"), embeddings)?;
    println!(
        "# wrote {} sentences ({} tokens) to {}",
        corpus.len(),
        corpus.total_tokens(),
        args.out.display()
    );
    Ok(())
}

fn cmd_export_latent(args: ExportArgs) -> anyhow::Result<()> {
    println!(
        "# resolved configuration\ncheckpoint = {:?}\nembeddings = {:?}\ncorpus = {:?}\nout = {:?}",
        args.checkpoint.display().to_string(),
        args.embeddings.display().to_string(),
        args.corpus.display().to_string(),
        args.out.display().to_string()
    );
    let ckpt: Checkpoint<Real> = optim::load_checkpoint(&args.checkpoint)?;
    let table = load_table(&args.embeddings, args.expected_dim, args.unk_policy)?;
    let corpus = data::load_corpus(&args.corpus, &table, None, None)?;
    data::export_latent(&corpus, &ckpt.model.flow, &args.out)?;
    println!("# wrote {}", args.out.display());
    Ok(())
}
