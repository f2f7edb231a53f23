use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use grain::annotation::{annotate_corpus, load_manifest, AnnotationError, HttpClient, ManifestError, MockFixtures};
use grain::config::{parse_assignment, read_config_file, resolve_config, sha256_file, ConfigError, GrainConfig, RunManifest};
use grain::model::{load_checkpoint, CheckpointError, ModelError};
use grain::shard::{inspect_shard, ShardError};
use grain::synth::{synth_grounded_dataset, SynthOptions};
use grain::tokenizer::Tokenizer;
use grain::training::{fit, FitOptions, TrainError};
use grain::zeroshot::{
    build_classifier, classify, classify_by_attributes, dump_groundings, load_eval_set, load_prompt_sets,
    map_free_text_to_vocab, retrieve, EvalError, ImageEncoder, TextEncoder,
};
use grain::Scalar;
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "grain", version, about = "Grounded region-description contrastive pretraining toolkit")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the run manifest here instead of next to the command's output.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Append JSON log lines to this file instead of stderr.
    #[arg(long, global = true)]
    log_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate images with subjects, descriptions, captions and boxes.
    Annotate(AnnotateArgs),
    /// Train a model on one or more shards.
    Train(TrainArgs),
    /// Zero-shot evaluation of a checkpoint.
    Eval {
        #[command(subcommand)]
        task: EvalTask,
    },
    /// Predicted boxes and best-matching region per description.
    Ground(GroundArgs),
    /// Generate the synthetic grounded dataset.
    Synth(SynthArgs),
    /// Summarize and validate a shard.
    InspectShard(InspectArgs),
}

#[derive(Args)]
struct AnnotateArgs {
    /// JSON Lines of `{image_id, image, caption}`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Canned client replies (JSON), for offline runs.
    #[arg(long, conflicts_with = "endpoint")]
    mock: Option<PathBuf>,
    /// Base URL of a generation/detection service.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "shard", required = true)]
    shards: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    /// Stop after this many optimizer steps (a later `--resume` continues).
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON Lines of `{image_id, image, label, captions}`.
    #[arg(long)]
    data: PathBuf,
    /// Report path (JSON); also printed to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalTask {
    /// Class names plus descriptions.
    Classify {
        #[command(flatten)]
        common: EvalCommon,
        /// JSON object of classname -> descriptions.
        #[arg(long)]
        descriptions: PathBuf,
    },
    /// Descriptions only, never the class name.
    Attrs {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long)]
        descriptions: PathBuf,
    },
    /// Image-to-text and text-to-image recall.
    Retrieve {
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Map a free-text answer onto the class vocabulary.
    Vocab {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        descriptions: PathBuf,
        #[arg(long)]
        answer: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Description to match; repeatable. Defaults to every description in `--descriptions`.
    #[arg(long = "text")]
    texts: Vec<String>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_images: usize,
    #[arg(long)]
    n_classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long, default_value_t = 0)]
    start_index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    shard: PathBuf,
}

/// What a command read and wrote, for the manifest.
#[derive(Default)]
struct RunRecord {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: u64,
    manifest_dir: Option<PathBuf>,
}

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(line: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

/// `{:#}` without repeating causes that a wrapper already printed.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) => 2,
                TrainError::Data(_) | TrainError::Shard(_) | TrainError::Checkpoint(_) | TrainError::Io(..) => 3,
                TrainError::Model(ModelError::Config(_)) => 2,
                _ => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Config(_) => 2,
                EvalError::Data(_) | EvalError::Io(..) => 3,
                _ => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<AnnotationError>() {
            return match e {
                AnnotationError::Config(_) => 2,
                AnnotationError::DuplicateId(_) | AnnotationError::Shard(_) => 3,
                _ => 4,
            };
        }
        if cause.is::<ShardError>() || cause.is::<ManifestError>() || cause.is::<CheckpointError>() {
            return 3;
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    4
}

fn init_logging(log_file: Option<&Path>) -> Result<()> {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder.format(|buf, record| {
        let line = json!({
            "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "level": record.level().as_str(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        writeln!(buf, "{line}")
    });
    if let Some(p) = log_file {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .with_context(|| format!("opening log file {}", p.display()))?;
        builder.target(env_logger::Target::Pipe(Box::new(f)));
    }
    builder.try_init()?;
    Ok(())
}

fn resolve(cli: &Cli) -> Result<GrainConfig> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let sets = cli.overrides.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with("GRAIN_")).collect();
    Ok(resolve_config(file.as_ref(), &sets, &env)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn annotate(args: &AnnotateArgs, cfg: &GrainConfig, rec: &mut RunRecord) -> Result<()> {
    rec.inputs.push(args.input.clone());
    let samples = load_manifest(&args.input)?;
    for s in &samples {
        if let Some(src) = &s.source {
            rec.inputs.push(args.input.parent().unwrap_or(Path::new("")).join(src));
        }
    }
    let report = match (&args.mock, &args.endpoint) {
        (Some(mock), _) => {
            rec.inputs.push(mock.clone());
            let text = std::fs::read_to_string(mock).with_context(|| format!("reading {}", mock.display()))?;
            let fx: MockFixtures = serde_json::from_str(&text).with_context(|| format!("parsing {}", mock.display()))?;
            annotate_corpus(&samples, &fx.generation, &fx.detection, &cfg.annotate, &args.out)?
        }
        (None, Some(url)) => {
            let client = HttpClient::new(url.clone());
            annotate_corpus(&samples, &client, &client, &cfg.annotate, &args.out)?
        }
        (None, None) => return Err(ConfigError::Invalid { key: "annotate".into(), message: "pass --mock or --endpoint".into() }.into()),
    };
    rec.outputs.push(args.out.clone());
    rec.outputs.push(grain::shard::meta_path(&args.out));
    emit(json!({"records": report.records.len(), "skipped": report.meta.skipped, "caption_fallbacks": report.meta.caption_fallbacks}));
    Ok(())
}

fn train_as<T: Scalar>(args: &TrainArgs, cfg: &GrainConfig, rec: &mut RunRecord) -> Result<()> {
    rec.inputs.extend(args.shards.iter().cloned());
    rec.seed = cfg.train.seed;
    let opts = FitOptions { resume: args.resume, stop_after: args.stop_after };
    let report = fit::<T>(&args.shards, &cfg.train, &args.out, &opts)?;
    rec.outputs.push(report.checkpoint.clone());
    rec.manifest_dir = Some(args.out.clone());
    let last = report.losses.last();
    emit(json!({
            "checkpoint": report.checkpoint,
            "steps": report.steps,
            "total_steps": report.total_steps,
            "finished": report.finished,
            "final_loss": last.map(|l| l.l_total),
            "digest": report.digest,
        })
    );
    Ok(())
}

fn load_model(path: &Path, rec: &mut RunRecord) -> Result<grain::Model32> {
    rec.inputs.push(path.to_path_buf());
    let ck = load_checkpoint::<f32>(path, Some(Tokenizer::bundled().identifier()))
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model)
}

fn eval(task: &EvalTask, cfg: &GrainConfig, rec: &mut RunRecord) -> Result<()> {
    let (out, report) = match task {
        EvalTask::Classify { common, descriptions } | EvalTask::Attrs { common, descriptions } => {
            let model = load_model(&common.checkpoint, rec)?;
            rec.inputs.extend([common.data.clone(), descriptions.clone()]);
            let sets = load_prompt_sets(descriptions, Some(&cfg.eval.template))?;
            let names: Vec<String> = sets.iter().map(|s| s.classname.clone()).collect();
            let data = load_eval_set::<f32>(&common.data, model.config().image_size)?;
            let labels = data.labels(&names)?;
            let name = common.data.display().to_string();
            let (preds, report) = if matches!(task, EvalTask::Classify { .. }) {
                let clf = build_classifier(&sets, &model)?;
                classify(&name, &data.images, &labels, &clf, &model)?
            } else {
                classify_by_attributes(&name, &data.images, &labels, &sets, &model, &model)?
            };
            let predictions: BTreeMap<&str, &str> =
                data.entries.iter().zip(&preds).map(|(e, &p)| (e.image_id.as_str(), names[p].as_str())).collect();
            (&common.out, json!({"report": report, "predictions": predictions}))
        }
        EvalTask::Retrieve { common } => {
            let model = load_model(&common.checkpoint, rec)?;
            rec.inputs.push(common.data.clone());
            let data = load_eval_set::<f32>(&common.data, model.config().image_size)?;
            let images = data.images.iter().map(|i| ImageEncoder::embed_image(&model, i)).collect::<Result<Vec<_>, _>>()?;
            let mut texts = Vec::new();
            let mut owner = Vec::new();
            for (i, e) in data.entries.iter().enumerate() {
                for c in &e.captions {
                    texts.push(TextEncoder::embed_text(&model, c)?);
                    owner.push(i);
                }
            }
            let report = retrieve(&common.data.display().to_string(), &images, &texts, &owner, &cfg.eval.ks)?;
            (&common.out, json!(report))
        }
        EvalTask::Vocab { checkpoint, descriptions, answer, out } => {
            let model = load_model(checkpoint, rec)?;
            rec.inputs.push(descriptions.clone());
            let vocab: Vec<String> = load_prompt_sets(descriptions, None)?.into_iter().map(|s| s.classname).collect();
            (out, json!(map_free_text_to_vocab(answer, &vocab, &model)?))
        }
    };
    write_json(out, &report)?;
    rec.outputs.push(out.clone());
    emit(serde_json::to_string(&report)?);
    Ok(())
}

fn ground(args: &GroundArgs, rec: &mut RunRecord) -> Result<()> {
    let model = load_model(&args.checkpoint, rec)?;
    rec.inputs.push(args.data.clone());
    let mut texts = args.texts.clone();
    if let Some(d) = &args.descriptions {
        rec.inputs.push(d.clone());
        for set in load_prompt_sets(d, None)? {
            texts.extend(set.descriptions);
        }
    }
    if texts.is_empty() {
        bail!(ConfigError::Invalid { key: "ground".into(), message: "pass --text or --descriptions".into() });
    }
    let data = load_eval_set::<f32>(&args.data, model.config().image_size)?;
    let ids: Vec<String> = data.entries.iter().map(|e| e.image_id.clone()).collect();
    let g = dump_groundings(&ids, &data.images, &texts, &model, &model, &args.out)?;
    rec.outputs.push(args.out.clone());
    emit(json!({"images": g.len(), "descriptions": texts.len(), "out": args.out}));
    Ok(())
}

fn synth(args: &SynthArgs, rec: &mut RunRecord) -> Result<()> {
    if args.n_classes == 0 || args.n_images < args.n_classes {
        bail!(ConfigError::Invalid { key: "n_images".into(), message: "need n_images >= n_classes >= 1".into() });
    }
    rec.seed = args.seed;
    let opts = SynthOptions { image_size: args.image_size, start_index: args.start_index };
    let r = synth_grounded_dataset(args.n_images, args.n_classes, args.seed, &args.out, opts)?;
    rec.outputs.extend([r.shard.clone(), grain::shard::meta_path(&r.shard), r.eval_manifest.clone(), r.descriptions.clone()]);
    rec.manifest_dir = Some(args.out.clone());
    emit(json!({"shard": r.shard, "eval": r.eval_manifest, "descriptions": r.descriptions, "records": r.records.len()}));
    Ok(())
}

fn inspect(args: &InspectArgs, rec: &mut RunRecord) -> Result<()> {
    rec.inputs.push(args.shard.clone());
    let summary = inspect_shard(&args.shard)?;
    emit(serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &GrainConfig, rec: &mut RunRecord) -> Result<()> {
    match &cli.command {
        Command::Annotate(a) => annotate(a, cfg, rec),
        Command::Train(a) => match a.dtype {
            Dtype::F32 => train_as::<f32>(a, cfg, rec),
            Dtype::F64 => train_as::<f64>(a, cfg, rec),
        },
        Command::Eval { task } => eval(task, cfg, rec),
        Command::Ground(a) => ground(a, rec),
        Command::Synth(a) => synth(a, rec),
        Command::InspectShard(a) => inspect(a, rec),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Annotate(_) => "annotate",
        Command::Train(_) => "train",
        Command::Eval { task: EvalTask::Classify { .. } } => "eval classify",
        Command::Eval { task: EvalTask::Attrs { .. } } => "eval attrs",
        Command::Eval { task: EvalTask::Retrieve { .. } } => "eval retrieve",
        Command::Eval { task: EvalTask::Vocab { .. } } => "eval vocab",
        Command::Ground(_) => "ground",
        Command::Synth(_) => "synth",
        Command::InspectShard(_) => "inspect-shard",
    }
}

/// Default manifest location: inside the output directory, or beside the
/// first output file, or beside the first input.
fn manifest_path(cli: &Cli, rec: &RunRecord, name: &str) -> PathBuf {
    if let Some(p) = &cli.manifest {
        return p.clone();
    }
    let stem = name.replace(' ', "-");
    if let Some(d) = &rec.manifest_dir {
        return d.join(format!("{stem}.manifest.json"));
    }
    match rec.outputs.first().or(rec.inputs.first()) {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(format!(".{stem}.manifest.json"));
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("{stem}.manifest.json")),
    }
}

fn digests(paths: &[PathBuf]) -> BTreeMap<String, String> {
    paths
        .iter()
        .filter_map(|p| sha256_file(p).ok().map(|d| (p.display().to_string(), d)))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging(cli.log_file.as_deref()) {
        eprintln!("error: {e:#}");
        return ExitCode::from(4);
    }
    let started_at = chrono::Utc::now().to_rfc3339();
    let name = command_name(&cli.command);
    let (cfg, result, mut rec) = match resolve(&cli) {
        Ok(cfg) => {
            let mut rec = RunRecord { seed: cfg.train.seed, ..RunRecord::default() };
            let result = dispatch(&cli, &cfg, &mut rec);
            (Some(cfg), result, rec)
        }
        Err(e) => (None, Err(e), RunRecord::default()),
    };
    if let Some(c) = &cli.config {
        rec.inputs.insert(0, c.clone());
    }
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        args: std::env::args().collect(),
        config: cfg,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: rec.seed,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        exit_code: i32::from(code),
        inputs: digests(&rec.inputs),
        outputs: if code == 0 { digests(&rec.outputs) } else { BTreeMap::new() },
    };
    let path = manifest_path(&cli, &rec, name);
    match manifest.write(&path) {
        Ok(()) => info!("run manifest written to {}", path.display()),
        Err(e) => log::warn!("could not write run manifest: {e}"),
    }
    if let Err(e) = result {
        let msg = describe(&e);
        log::error!("{msg}");
        eprintln!("error: {msg}");
    }
    ExitCode::from(code)
}
