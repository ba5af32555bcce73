//! `make-vlp`: synthesize a corpus, train the dual encoder, evaluate it
//! zero-shot, check loss gradients and run the ablation table.
//!
//! Exit codes: 0 ok, 1 gradient check failed, 2 configuration, 3 I/O,
//! 4 numeric failure, 5 incompatible checkpoint or manifest.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use make_core::corpus::{load_manifest, synth_generate, write_manifest, CorpusManifest, SplitTag};
use make_core::evaluator::{ablation_base, ablation_run, canonical_rows, evaluate, AblationTable, EvalTasks, PromptSet};
use make_core::gradcheck::{check_total_loss, GradCheckReport};
use make_core::trainer::{config_hash, train_with, TrainOptions, TrainState, FINAL_CHECKPOINT, METRICS_FILE};
use make_core::Error;
use serde_json::{json, Value};

use config::{read_file, resolve, Overrides, Resolved, RunConfig};

const OUT_DIR_ENV: &str = "MAKE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "out";

#[derive(Parser)]
#[command(name = "make-vlp", version, about = "Multi-aspect knowledge-enhanced vision-language pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and write train/eval manifests
    Synth(SynthArgs),
    /// Train the dual encoder on a manifest
    Train(TrainArgs),
    /// Zero-shot evaluation of a checkpoint
    Eval(EvalArgs),
    /// Finite-difference check of the full loss gradient on toy batches
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the five ablation rows over several seeds
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file with flat dotted keys (e.g. "train.epochs")
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory; beats MAKE_OUT_DIR and paths.out_dir [default: out]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of disease classes [default: 8]
    #[arg(long)]
    classes: Option<usize>,
    /// Records per class [default: 50]
    #[arg(long)]
    per_class: Option<usize>,
    /// Generator and split seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Image side in pixels [default: 32]
    #[arg(long)]
    image_size: Option<usize>,
    /// Patch side in pixels [default: 8]
    #[arg(long)]
    patch_size: Option<usize>,
    /// Fraction of each class held out for evaluation [default: 0.2]
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args)]
struct ModelFlags {
    /// Shared embedding width of both encoders [default: 64]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Transformer blocks in both encoders [default: 2]
    #[arg(long)]
    depth: Option<usize>,
    /// Attention heads in both encoders [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Input image side in pixels [default: 32]
    #[arg(long)]
    image_size: Option<usize>,
    /// Patch side in pixels [default: 8]
    #[arg(long)]
    patch_size: Option<usize>,
    /// Token vocabulary size [default: 4096]
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Text context length in tokens [default: 77]
    #[arg(long)]
    context_length: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    /// Passes over the training set [default: 15; ablate: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Records per step [default: 64; ablate: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak AdamW learning rate [default: 1e-4; ablate: 1e-3]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Linear warmup length in steps [default: 100; ablate: 20]
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Decoupled weight decay [default: 0.1]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Weight of the subtext alignment loss [default: 0.7]
    #[arg(long)]
    lambda: Option<f64>,
    /// Subtext slots per record [default: 4]
    #[arg(long)]
    k_max: Option<usize>,
    /// Initial temperature [default: 0.07]
    #[arg(long)]
    tau_init: Option<f64>,
    /// Disease and concept texts in the contrastive loss [default: true]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    enable_mkcl_knowledge: Option<bool>,
    /// Subtexts in the contrastive loss [default: true]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    enable_mkcl_subtexts: Option<bool>,
    /// Subtext alignment loss [default: true]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    enable_slra: Option<bool>,
    /// Diagnosis-guided subtext weights [default: true]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    enable_dkw: Option<bool>,
    /// Image-to-text denominator over images instead of texts [default: false]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    literal_eq3: Option<bool>,
    /// Similarity map divided by its sum instead of a softmax [default: false]
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    literal_eq5: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest (JSON lines)
    #[arg(long, value_name = "FILE")]
    train_manifest: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Initialization and shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Evaluation manifest (JSON lines)
    #[arg(long, value_name = "FILE")]
    eval_manifest: Option<PathBuf>,
    /// Comma-separated tasks [default: classify,concepts,retrieval]
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Comma-separated recall cutoffs [default: 1,5,10]
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Prompt template containing {}; repeat for several [default: the three built-in templates]
    #[arg(long = "prompt", value_name = "TEMPLATE")]
    prompts: Option<Vec<String>>,
    /// Seed recorded in the report [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Finite-difference step [default: 1e-3]
    #[arg(long)]
    eps: Option<f64>,
    /// Relative error tolerance [default: 1e-3]
    #[arg(long)]
    tol: Option<f64>,
    /// Temperature of the checked loss [default: 0.07]
    #[arg(long)]
    tau: Option<f64>,
    /// Random batches checked, seeds seed..seed+trials [default: 5]
    #[arg(long)]
    trials: Option<usize>,
    /// First batch seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Arithmetic precision, f64 or f32 [default: f64]
    #[arg(long)]
    precision: Option<String>,
    /// Batch size [default: 4]
    #[arg(long)]
    n: Option<usize>,
    /// Subtext slots [default: 2]
    #[arg(long)]
    k_max: Option<usize>,
    /// Embedding width [default: 8]
    #[arg(long)]
    dim: Option<usize>,
    /// Patches per image [default: 4]
    #[arg(long)]
    hw: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest (JSON lines)
    #[arg(long, value_name = "FILE")]
    train_manifest: Option<PathBuf>,
    /// Evaluation manifest (JSON lines)
    #[arg(long, value_name = "FILE")]
    eval_manifest: Option<PathBuf>,
    /// Comma-separated training seeds per row [default: 1,2,3]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads, 0 for all cores [default: 0]
    #[arg(long)]
    threads: Option<usize>,
    /// Prompt template containing {}; repeat for several [default: the three built-in templates]
    #[arg(long = "prompt", value_name = "TEMPLATE")]
    prompts: Option<Vec<String>>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
}

impl Common {
    fn put(&self, o: &mut Overrides) {
        o.put("paths.out_dir", &self.out_dir);
    }
}

impl ModelFlags {
    fn put(&self, o: &mut Overrides) {
        for side in ["vision", "text"] {
            o.put(&format!("model.{side}.embed_dim"), &self.embed_dim);
            o.put(&format!("model.{side}.depth"), &self.depth);
            o.put(&format!("model.{side}.heads"), &self.heads);
        }
        o.put("model.vision.image_size", &self.image_size)
            .put("model.vision.patch_size", &self.patch_size)
            .put("model.text.vocab_size", &self.vocab_size)
            .put("model.text.context_length", &self.context_length);
    }
}

impl TrainFlags {
    fn put(&self, o: &mut Overrides) {
        o.put("train.epochs", &self.epochs)
            .put("train.batch_size", &self.batch_size)
            .put("train.learning_rate", &self.learning_rate)
            .put("train.warmup_steps", &self.warmup_steps)
            .put("train.weight_decay", &self.weight_decay)
            .put("train.lambda", &self.lambda)
            .put("train.k_max", &self.k_max)
            .put("train.tau_init", &self.tau_init)
            .put("train.enable_mkcl_knowledge", &self.enable_mkcl_knowledge)
            .put("train.enable_mkcl_subtexts", &self.enable_mkcl_subtexts)
            .put("train.enable_slra", &self.enable_slra)
            .put("train.enable_dkw", &self.enable_dkw)
            .put("train.literal_eq3", &self.literal_eq3)
            .put("train.literal_eq5", &self.literal_eq5);
    }
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::InsufficientData { .. } | Error::EmptyPromptSet | Error::EmptyBatch => 2,
            Error::MissingFile(_) | Error::Io(_) | Error::SchemaViolation { .. } | Error::EmptyManifest | Error::NoScorableConcepts => 3,
            Error::NonFiniteLoss { .. } | Error::DegenerateMap | Error::NoValidPairs => 4,
            Error::VersionMismatch(_) | Error::Incompatible(_) | Error::ShapeMismatch(_) => 5,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<ExitCode, Failure>;

/// Defaults, then the config file, then `MAKE_OUT_DIR`, then flags.
fn layered(defaults: RunConfig, common: &Common, flags: Overrides) -> Result<Resolved, Error> {
    let mut layers = Vec::new();
    if let Some(path) = &common.config {
        layers.push(read_file(path)?);
    }
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
        layers.push(vec![("paths.out_dir".to_string(), Value::String(dir.to_string_lossy().into_owned()))]);
    }
    layers.push(flags.0);
    resolve(&defaults, &layers)
}

fn out_dir(r: &Resolved) -> Result<PathBuf, Error> {
    let dir = r.config.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn required(p: &Option<PathBuf>, key: &str, flag: &str) -> Result<PathBuf, Error> {
    p.clone().ok_or_else(|| Error::InvalidConfig(format!("{key} (--{flag}) is required")))
}

fn write_provenance(dir: &Path, command: &str, section: Value, seed: Value) -> Result<String, Error> {
    let hash = config_hash(&section);
    let doc = json!({ "command": command, "config_hash": hash, "seed": seed, "config": section });
    fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&doc).expect("serializable") + "\n")?;
    Ok(hash)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut o = Overrides::default();
    a.common.put(&mut o);
    o.put("synth.classes", &a.classes)
        .put("synth.per_class", &a.per_class)
        .put("synth.seed", &a.seed)
        .put("synth.image_size", &a.image_size)
        .put("synth.patch_size", &a.patch_size)
        .put("synth.eval_fraction", &a.eval_fraction);
    let r = layered(RunConfig::default(), &a.common, o)?;
    let s = &r.config.synth;
    if s.classes < 2 {
        return Err(Error::InvalidConfig(format!("synth.classes (--classes) must be at least 2, got {}", s.classes)).into());
    }
    if s.per_class < 1 {
        return Err(Error::InvalidConfig("synth.per_class (--per-class) must be at least 1".into()).into());
    }
    let corpus = synth_generate(&s.synth_config())?;
    let (train, eval) = corpus.split(s.eval_fraction, s.seed)?;
    let dir = out_dir(&r)?;
    write_manifest(&train, &dir.join("train.jsonl"))?;
    write_manifest(&eval, &dir.join("eval.jsonl"))?;
    let hash = write_provenance(&dir, "synth", to_value(s), json!(s.seed))?;
    println!("wrote {} train and {} eval records to {} (config {hash})", train.len(), eval.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut o = Overrides::default();
    a.common.put(&mut o);
    o.put("paths.train_manifest", &a.train_manifest).put("paths.resume", &a.resume).put("train.seed", &a.seed);
    a.train.put(&mut o);
    a.model.put(&mut o);
    let r = layered(RunConfig::default(), &a.common, o)?;
    let cfg = r.config.train_config();
    cfg.validate()?;
    let manifest = load_manifest(&required(&r.config.paths.train_manifest, "paths.train_manifest", "train-manifest")?, SplitTag::Train)?;
    let resume = r.config.paths.resume.as_deref().map(TrainState::load).transpose()?;
    let dir = out_dir(&r)?;
    let outcome = train_with(&manifest, &cfg, TrainOptions { out_dir: Some(dir.clone()), resume })?;
    let hash = write_provenance(&dir, "train", to_value(&cfg), json!(cfg.seed))?;

    println!("{:>5} {:>6} {:>11} {:>11} {:>11} {:>8}", "epoch", "steps", "loss_total", "loss_mkcl", "loss_slra", "tau");
    for e in &outcome.epochs {
        let slra = e.mean_slra.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
        println!("{:>5} {:>6} {:>11.5} {:>11.5} {:>11} {:>8.5}", e.epoch, e.steps, e.mean_total, e.mean_mkcl, slra, e.tau);
    }
    println!("metrics: {}", dir.join(METRICS_FILE).display());
    println!("checkpoint: {} (config {hash})", dir.join(FINAL_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

fn parse_tasks(tasks: &[String], ks: &[usize]) -> Result<EvalTasks, Error> {
    let mut t = EvalTasks { classify: false, concepts: false, retrieval_ks: Vec::new() };
    for name in tasks {
        match name.trim() {
            "classify" => t.classify = true,
            "concepts" => t.concepts = true,
            "retrieval" => t.retrieval_ks = ks.to_vec(),
            other => return Err(Error::InvalidConfig(format!("eval.tasks: unknown task `{other}`"))),
        }
    }
    if tasks.iter().any(|n| n.trim() == "retrieval") && ks.is_empty() {
        return Err(Error::InvalidConfig("eval.ks must not be empty for retrieval".into()));
    }
    Ok(t)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut o = Overrides::default();
    a.common.put(&mut o);
    o.put("paths.checkpoint", &a.checkpoint)
        .put("paths.eval_manifest", &a.eval_manifest)
        .put("eval.tasks", &a.tasks)
        .put("eval.ks", &a.ks)
        .put("eval.prompts", &a.prompts)
        .put("eval.seed", &a.seed);
    a.model.put(&mut o);
    let r = layered(RunConfig::default(), &a.common, o)?;
    let e = &r.config.eval;
    let tasks = parse_tasks(&e.tasks, &e.ks)?;
    let prompts = PromptSet::new(e.prompts.clone())?;
    let ckpt = required(&r.config.paths.checkpoint, "paths.checkpoint", "checkpoint")?;
    let manifest_path = required(&r.config.paths.eval_manifest, "paths.eval_manifest", "eval-manifest")?;
    let state = TrainState::load(&ckpt)?;
    if r.set_explicitly("model") && r.config.model != state.model {
        return Err(Error::Incompatible(format!(
            "checkpoint has embed_dim {} but the config asks for {}",
            state.model.embed_dim(),
            r.config.model.embed_dim()
        ))
        .into());
    }
    let encoder = state.encoder()?;
    let manifest = load_manifest(&manifest_path, SplitTag::Eval)?;
    let section = json!({ "eval": r.config.eval, "model": state.model, "checkpoint_config": state.config_hash });
    let report = evaluate(&encoder, &manifest, &prompts, &tasks, &config_hash(&section), e.seed)?;
    let dir = out_dir(&r)?;
    fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    write_provenance(&dir, "eval", section, json!(e.seed))?;
    print!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut o = Overrides::default();
    a.common.put(&mut o);
    o.put("gradcheck.eps", &a.eps)
        .put("gradcheck.tol", &a.tol)
        .put("gradcheck.tau", &a.tau)
        .put("gradcheck.trials", &a.trials)
        .put("gradcheck.seed", &a.seed)
        .put("gradcheck.precision", &a.precision)
        .put("gradcheck.shape.n", &a.n)
        .put("gradcheck.shape.k_max", &a.k_max)
        .put("gradcheck.shape.dim", &a.dim)
        .put("gradcheck.shape.hw", &a.hw);
    let r = layered(RunConfig::default(), &a.common, o)?;
    let g = &r.config.gradcheck;
    if !(g.eps > 0.0) || !(g.tol >= 0.0) || g.trials == 0 {
        return Err(Error::InvalidConfig("gradcheck needs eps > 0, tol >= 0 and at least one trial".into()).into());
    }
    if !(g.tau > 0.0) {
        return Err(Error::InvalidConfig("gradcheck.tau must be positive".into()).into());
    }
    let mut reports: Vec<GradCheckReport> = Vec::with_capacity(g.trials);
    for t in 0..g.trials as u64 {
        let seed = g.seed + t;
        let rep = match g.precision.as_str() {
            "f64" => check_total_loss::<f64>(g.shape, g.tau, g.eps, g.tol, seed)?,
            "f32" => check_total_loss::<f32>(g.shape, g.tau, g.eps, g.tol, seed)?,
            other => return Err(Error::InvalidConfig(format!("gradcheck.precision must be f64 or f32, got `{other}`")).into()),
        };
        println!("seed {seed:>4}  max rel error {:.3e}  coordinates {:>4}  {}", rep.worst(), rep.coordinates_checked, if rep.pass { "pass" } else { "FAIL" });
        reports.push(rep);
    }
    let pass = reports.iter().all(|r| r.pass);
    let summary = json!({ "config_hash": config_hash(&to_value(g)), "pass": pass, "reports": reports });
    println!("{summary}");
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_pair(r: &Resolved) -> Result<(CorpusManifest, CorpusManifest), Error> {
    let train = load_manifest(&required(&r.config.paths.train_manifest, "paths.train_manifest", "train-manifest")?, SplitTag::Train)?;
    let eval = load_manifest(&required(&r.config.paths.eval_manifest, "paths.eval_manifest", "eval-manifest")?, SplitTag::Eval)?;
    Ok((train, eval))
}

fn print_ranked(table: &AblationTable) {
    let mut rows: Vec<_> = table.rows.iter().collect();
    rows.sort_by(|a, b| b.acc_mean.total_cmp(&a.acc_mean));
    println!("{:>4}  {:<16} {:>9} {:>8} {:>10} {:>8}", "rank", "row", "acc_mean", "acc_sd", "auroc_mean", "auroc_sd");
    for (i, r) in rows.iter().enumerate() {
        println!("{:>4}  {:<16} {:>9.4} {:>8.4} {:>10.4} {:>8.4}", i + 1, r.row, r.acc_mean, r.acc_sd, r.auroc_mean, r.auroc_sd);
    }
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut o = Overrides::default();
    a.common.put(&mut o);
    o.put("paths.train_manifest", &a.train_manifest)
        .put("paths.eval_manifest", &a.eval_manifest)
        .put("ablate.seeds", &a.seeds)
        .put("ablate.threads", &a.threads)
        .put("eval.prompts", &a.prompts);
    a.train.put(&mut o);
    a.model.put(&mut o);
    let defaults = RunConfig { train: ablation_base(), ..RunConfig::default() };
    let r = layered(defaults, &a.common, o)?;
    let base = r.config.train_config();
    base.validate()?;
    let prompts = PromptSet::new(r.config.eval.prompts.clone())?;
    let ab = &r.config.ablate;
    if ab.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablate.seeds must not be empty".into()).into());
    }
    let (train, eval) = load_pair(&r)?;
    let dir = out_dir(&r)?;
    let table = ablation_run(&train, &eval, &base, &canonical_rows(), &ab.seeds, &prompts, ab.workers())?;
    fs::write(dir.join("ablation.csv"), table.to_csv())?;
    let section = json!({ "train": base, "seeds": ab.seeds, "prompts": r.config.eval.prompts });
    let hash = write_provenance(&dir, "ablate", section, json!(ab.seeds))?;
    print_ranked(&table);
    println!("table: {} (config {hash})", dir.join("ablation.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
