//! `lcpvae`: generate synthetic data, train and evaluate the models, draw
//! samples and run the CVAE / LCPVAE / ablation comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use lcpvae::config::RunConfig;
use lcpvae::data::{generate, Split, SynthSpec};
use lcpvae::eval::{DumpSpace, EvalOptions};
use lcpvae::models::{ConditionKind, FreezeScope, ModelKind, SampleMode};
use lcpvae::run::{self, OUTPUT_ROOT_ENV};
use lcpvae::training::AnnealShape;
use lcpvae::{Error, ErrorKind, Result};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Parses a snake_case (or kebab-case) enum value through its serde name.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("invalid value `{s}`"))
}

#[derive(Parser)]
#[command(name = "lcpvae", version, about = "Learned conditional prior VAE experiments on synthetic data")]
struct Cli {
    /// Root directory for default output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = run::DEFAULT_OUTPUT_ROOT)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic condition-labeled dataset.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: report, latent dump and scatter plot.
    Eval(EvalArgs),
    /// Generate vectors for one condition from a checkpoint.
    Sample(SampleArgs),
    /// Train and compare CVAE, LCPVAE and the ablation on one dataset.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of conditions.
    #[arg(long)]
    k: Option<usize>,
    /// Observation dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Samples per condition.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    between_scale: Option<f64>,
    #[arg(long)]
    within_factors: Option<usize>,
    #[arg(long)]
    within_scale: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    embedding_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (default: <output-root>/dataset.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<ConditionKind>)]
    condition_input: Option<ConditionKind>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Hidden widths of the primary encoder and decoder, comma separated.
    #[arg(long, value_delimiter = ',')]
    primary_hidden: Option<Vec<usize>>,
    /// Hidden widths of the secondary VAE, comma separated.
    #[arg(long, value_delimiter = ',')]
    csvae_hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_enum::<AnnealShape>)]
    anneal_shape: Option<AnnealShape>,
    #[arg(long)]
    anneal_start: Option<u64>,
    #[arg(long)]
    anneal_warmup: Option<u64>,
    #[arg(long)]
    anneal_max: Option<f64>,
    #[arg(long, value_parser = parse_enum::<FreezeScope>)]
    freeze_scope: Option<FreezeScope>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file (default: <output-root>/dataset.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_enum::<ModelKind>)]
    model: Option<ModelKind>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalSettings {
    /// Inference samples per condition.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Seed for evaluation noise.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, value_parser = parse_enum::<Split>, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file (default: <output-root>/dataset.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Latent space to dump: primary or csvae.
    #[arg(long, value_parser = parse_enum::<DumpSpace>, default_value = "primary")]
    dump_space: DumpSpace,
    /// Sampling mode (default: conditional_posterior where available, else prior).
    #[arg(long, value_parser = parse_enum::<SampleMode>)]
    mode: Option<SampleMode>,
    #[command(flatten)]
    settings: EvalSettings,
    /// Output directory (default: <checkpoint dir>/eval).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    condition: usize,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_enum::<SampleMode>)]
    mode: Option<SampleMode>,
    /// Output file (default: <checkpoint dir>/samples_c<condition>_s<seed>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    settings: EvalSettings,
}

fn resolve_spec(a: &GenDataArgs) -> Result<SynthSpec> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = a.$flag { spec.$field = v; }
        )*};
    }
    set!(k => num_conditions, d => data_dim, n => n_per_condition,
        between_scale => between_scale, within_factors => within_factors,
        within_scale => within_scale, noise_scale => noise_scale,
        embedding_dim => embedding_dim, embedding_noise => embedding_noise, seed => seed);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn resolve_config(a: &ConfigArgs, model: Option<ModelKind>, root: &Path) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) if !p.is_file() => {
            return Err(Error::Config(format!("config `{}` does not exist", p.display())))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => {$(
            if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; }
        )*};
    }
    set!(condition_input => condition_input, latent_dim => latent_dim,
        primary_hidden => primary_hidden, csvae_hidden => csvae_hidden,
        epochs => epochs, batch_size => batch_size,
        learning_rate => optimizer.learning_rate, anneal_shape => anneal.shape,
        anneal_start => anneal.start_step, anneal_warmup => anneal.warmup_steps,
        anneal_max => anneal.max_weight, freeze_scope => freeze_scope,
        log_every => log_every, seed => seed);
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if cfg.dataset.is_none() {
        cfg.dataset = Some(root.join("dataset.jsonl"));
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_options(s: &EvalSettings, space: DumpSpace, mode: Option<SampleMode>) -> EvalOptions {
    EvalOptions {
        space,
        split: s.split,
        samples_per_condition: s.samples,
        seed: s.eval_seed,
        mode,
    }
}

fn gen_data(a: &GenDataArgs, root: &Path) -> Result<()> {
    let spec = resolve_spec(a)?;
    let ds = generate(&spec)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("dataset.jsonl"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.save(&out)?;
    let mut counts = vec![0usize; ds.num_conditions()];
    for r in ds.records() {
        counts[r.condition_id] += 1;
    }
    println!("wrote {} ({} samples, hash {})", out.display(), ds.len(), ds.content_hash()?);
    for (k, c) in counts.iter().enumerate() {
        println!("  condition {k}: {c} samples");
    }
    println!(
        "  train/validation/test: {}/{}/{}",
        ds.split(Split::Train).len(),
        ds.split(Split::Validation).len(),
        ds.split(Split::Test).len()
    );
    println!("  raw centroid accuracy: {:.4}", ds.raw_centroid_accuracy());
    Ok(())
}

fn train(a: &TrainArgs, root: &Path) -> Result<()> {
    let mut cfg = resolve_config(&a.config, a.model, root)?;
    let ds = run::load_dataset(cfg.dataset.as_deref().expect("resolved"))?;
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| root.join(format!("{}-seed{}", cfg.model, cfg.seed)));
    cfg.output_dir = Some(dir.clone());
    let art = run::train_to_dir(&cfg, &ds, &dir)?;
    println!("trained {} for {} steps -> {}", cfg.model, art.steps, dir.display());
    println!(
        "  train loss {:.4} -> {:.4}, validation {:.4}",
        art.initial_loss.total, art.final_loss.total, art.validation_loss.total
    );
    Ok(())
}

fn default_dataset(root: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| root.join("dataset.jsonl"))
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn eval(a: &EvalArgs, root: &Path) -> Result<()> {
    let model = run::load_model(&a.checkpoint)?;
    let ds = run::load_dataset(&default_dataset(root, &a.dataset))?;
    let opts = eval_options(&a.settings, a.dump_space, a.mode);
    let dir = a.out.clone().unwrap_or_else(|| checkpoint_dir(&a.checkpoint).join("eval"));
    let r = run::eval_to_dir(&model, &ds, &opts, &dir)?;
    println!("evaluated {} -> {}", r.model, dir.display());
    let encoded = r.posterior_silhouette.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "  silhouette {:.4} (encoded {encoded}), condition accuracy {:.4}, variability {:.4}",
        r.silhouette, r.condition_accuracy, r.mean_output_variability
    );
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let model = run::load_model(&a.checkpoint)?;
    let set = run::sample(&model, a.condition, a.n, a.seed, a.mode)?;
    let out = a.out.clone().unwrap_or_else(|| {
        checkpoint_dir(&a.checkpoint).join(format!("samples_c{}_s{}.json", a.condition, a.seed))
    });
    run::save_samples(&set, &out)?;
    println!("wrote {} samples for condition {} -> {}", a.n, a.condition, out.display());
    Ok(())
}

fn compare(a: &CompareArgs, root: &Path) -> Result<()> {
    let cfg = resolve_config(&a.config, None, root)?;
    let ds = run::load_dataset(cfg.dataset.as_deref().expect("resolved"))?;
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| root.join(format!("compare-seed{}", cfg.seed)));
    let opts = eval_options(&a.settings, DumpSpace::Primary, None);
    let cmp = run::compare(&cfg, &ds, &opts, Some(&dir))?;
    println!("comparison -> {}", dir.join(run::COMPARISON_FILE).display());
    println!("  {:<16} {:>10} {:>10} {:>10}", "model", "silhouette", "accuracy", "variab.");
    for (k, m) in &cmp.models {
        println!(
            "  {:<16} {:>10.4} {:>10.4} {:>10.4}",
            k.as_str(),
            m.silhouette,
            m.condition_accuracy,
            m.mean_output_variability
        );
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
        ErrorKind::Other => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root.as_path();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, root),
        Command::Train(a) => train(a, root),
        Command::Eval(a) => eval(a, root),
        Command::Sample(a) => sample(a),
        Command::Compare(a) => compare(a, root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
