//! File-level commands behind the `lcpvae` binary: dataset generation,
//! training runs, evaluation, sampling and the three-way comparison.
//!
//! Every command is a pure function of its inputs; rerunning one with the
//! same inputs rewrites byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_for_condition, pca_project, variability, DumpSpace, EvalOptions,
    EvalReport, LatentSource};
use crate::models::{Checkpoint, Model, ModelKind, SampleMode};
use crate::svg;
use crate::training::{split_loss, LossBreakdown, MetricRecord, RunArtifacts, Trainer};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LCPVAE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "lcpvae-runs";

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const COMPARISON_FILE: &str = "comparison.json";

/// `$LCPVAE_OUTPUT_ROOT`, or `lcpvae-runs` when unset or empty.
pub fn output_root() -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_ROOT),
    }
}

/// Loads a dataset, treating a missing file as a configuration error.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "dataset `{}` does not exist",
            path.display()
        )));
    }
    Dataset::load(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "checkpoint `{}` does not exist",
            path.display()
        )));
    }
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn metrics_jsonl(metrics: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Final numbers of a training run, written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelKind,
    pub seed: u64,
    pub steps: u64,
    pub dataset_hash: String,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub validation_loss: LossBreakdown,
}

/// Trains and persists `config.json`, `checkpoint.json`, `metrics.jsonl`
/// and `summary.json` under `dir`.
///
/// On a numerical abort the last finite weights go to
/// `checkpoint.last_good.json` with the metrics logged so far, and the
/// error is returned.
pub fn train_to_dir(config: &RunConfig, dataset: &Dataset, dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    config.save(&dir.join(CONFIG_FILE))?;
    let echo = Some(config.to_json());

    let mut trainer = Trainer::new(config, dataset)?;
    let final_lambda = config.anneal.weight(trainer.total_steps().saturating_sub(1));
    let initial_loss = split_loss(trainer.model(), dataset, Split::Train, final_lambda)?;
    if let Err(e) = trainer.run() {
        trainer
            .model()
            .to_checkpoint(echo)
            .save(&dir.join(LAST_GOOD_FILE))?;
        fs::write(dir.join(METRICS_FILE), metrics_jsonl(trainer.metrics())?)?;
        return Err(e);
    }
    let (config, model, metrics, steps) = trainer.into_parts();
    let final_loss = split_loss(&model, dataset, Split::Train, final_lambda)?;
    let validation_loss = split_loss(&model, dataset, Split::Validation, final_lambda)?;

    model.to_checkpoint(echo).save(&dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(METRICS_FILE), metrics_jsonl(&metrics)?)?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &RunSummary {
            model: config.model,
            seed: config.seed,
            steps,
            dataset_hash: dataset.content_hash()?,
            initial_loss,
            final_loss,
            validation_loss,
        },
    )?;
    Ok(RunArtifacts {
        config,
        model,
        metrics,
        steps,
        initial_loss,
        final_loss,
        validation_loss,
    })
}

fn space_name(space: DumpSpace) -> &'static str {
    match space {
        DumpSpace::Primary => "primary",
        DumpSpace::Csvae => "csvae",
    }
}

/// Evaluates and writes `eval_report.json`, `latents_<space>.csv` and
/// `scatter_<space>.svg` (PCA of the encoded split) under `dir`.
pub fn eval_to_dir(model: &Model, dataset: &Dataset, opts: &EvalOptions, dir: &Path) -> Result<EvalReport> {
    let ev = evaluate(model, dataset, opts)?;
    fs::create_dir_all(dir)?;
    let space = space_name(opts.space);
    fs::write(dir.join(REPORT_FILE), ev.report.to_json()?)?;
    ev.dump.save_csv(&dir.join(format!("latents_{space}.csv")))?;

    let encoded = ev.dump.filter(LatentSource::EncoderPosterior);
    let points = encoded.points();
    let projected: Vec<[f64; 2]> = if encoded.dim() >= 2 {
        pca_project(&points, 2)?.into_iter().map(|p| [p[0], p[1]]).collect()
    } else {
        points.iter().map(|p| [p[0], 0.0]).collect()
    };
    let title = format!("{} {space} latent (PCA)", model.kind());
    fs::write(
        dir.join(format!("scatter_{space}.svg")),
        svg::scatter(&projected, &encoded.labels(), &title)?,
    )?;
    Ok(ev.report)
}

/// Generated vectors for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub model: ModelKind,
    pub condition_id: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub latents: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// Mean per-dimension standard deviation of `outputs` (`None` for a
    /// single sample).
    pub variability: Option<f64>,
}

pub fn sample(model: &Model, condition: usize, n: usize, seed: u64, mode: Option<SampleMode>) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if model.kind().is_conditional() && condition >= model.num_conditions() {
        return Err(Error::Config(format!(
            "condition {condition} out of range (model has {})",
            model.num_conditions()
        )));
    }
    let mode = mode.unwrap_or_else(|| SampleMode::default_for(model.kind()));
    let g = generate_for_condition(model, condition, n, seed, mode)?;
    Ok(SampleSet {
        model: model.kind(),
        condition_id: condition,
        seed,
        mode,
        variability: if n >= 2 { Some(variability(&g.output)?) } else { None },
        latents: g.latent.to_rows(),
        outputs: g.output.to_rows(),
    })
}

pub fn save_samples(samples: &SampleSet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(path, samples)
}

/// Metrics of one model inside a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub silhouette: f64,
    pub posterior_silhouette: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csvae_silhouette: Option<f64>,
    pub intra_inter_ratio: f64,
    pub condition_accuracy: f64,
    pub per_condition_output_variability: Vec<f64>,
    pub mean_output_variability: f64,
    pub per_dim_kl: Vec<f64>,
    pub steps: u64,
    pub final_loss: LossBreakdown,
    pub validation_loss: LossBreakdown,
}

/// Differences `a - b` of the headline metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub silhouette: f64,
    pub condition_accuracy: f64,
    pub mean_output_variability: f64,
}

impl MetricDelta {
    fn between(a: &ModelMetrics, b: &ModelMetrics) -> Self {
        MetricDelta {
            silhouette: a.silhouette - b.silhouette,
            condition_accuracy: a.condition_accuracy - b.condition_accuracy,
            mean_output_variability: a.mean_output_variability - b.mean_output_variability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_hash: String,
    pub seed: u64,
    pub eval_seed: u64,
    pub models: BTreeMap<ModelKind, ModelMetrics>,
    /// Keyed `<a>_vs_<b>`, each holding `a - b`.
    pub deltas: BTreeMap<String, MetricDelta>,
}

pub const COMPARED: [ModelKind; 3] = [ModelKind::Cvae, ModelKind::Lcpvae, ModelKind::LcpvaeAblation];

fn model_metrics(art: &RunArtifacts, dataset: &Dataset, opts: &EvalOptions, dir: Option<&Path>) -> Result<ModelMetrics> {
    let primary = EvalOptions {
        space: DumpSpace::Primary,
        ..*opts
    };
    let report = match dir {
        Some(d) => eval_to_dir(&art.model, dataset, &primary, d)?,
        None => evaluate(&art.model, dataset, &primary)?.report,
    };
    let csvae_silhouette = if art.model.kind() == ModelKind::Lcpvae {
        let cs = EvalOptions {
            space: DumpSpace::Csvae,
            ..*opts
        };
        let r = match dir {
            Some(d) => eval_to_dir(&art.model, dataset, &cs, &d.join("csvae"))?,
            None => evaluate(&art.model, dataset, &cs)?.report,
        };
        r.posterior_silhouette
    } else {
        None
    };
    Ok(ModelMetrics {
        silhouette: report.silhouette,
        posterior_silhouette: report.posterior_silhouette,
        csvae_silhouette,
        intra_inter_ratio: report.intra_inter_ratio,
        condition_accuracy: report.condition_accuracy,
        per_condition_output_variability: report.per_condition_output_variability,
        mean_output_variability: report.mean_output_variability,
        per_dim_kl: report.per_dim_kl,
        steps: art.steps,
        final_loss: art.final_loss,
        validation_loss: art.validation_loss,
    })
}

/// Trains CVAE, LCPVAE and the ablation with the shared config and seed
/// (concurrently, one thread each), evaluates them and reports pairwise
/// deltas. With `dir`, each run is persisted under `dir/<model>/` and the
/// comparison goes to `dir/comparison.json`.
pub fn compare(config: &RunConfig, dataset: &Dataset, opts: &EvalOptions, dir: Option<&Path>) -> Result<Comparison> {
    config.validate()?;
    let results: Vec<Result<ModelMetrics>> = std::thread::scope(|s| {
        let handles: Vec<_> = COMPARED
            .iter()
            .map(|&kind| {
                let cfg = RunConfig {
                    model: kind,
                    ..config.clone()
                };
                s.spawn(move || {
                    let sub = dir.map(|d| d.join(kind.as_str()));
                    let art = match &sub {
                        Some(d) => train_to_dir(&cfg, dataset, d)?,
                        None => crate::training::train(&cfg, dataset)?,
                    };
                    model_metrics(&art, dataset, opts, sub.as_deref())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("training thread panicked".into()))))
            .collect()
    });
    let mut models = BTreeMap::new();
    for (kind, r) in COMPARED.iter().zip(results) {
        models.insert(*kind, r?);
    }
    let pairs = [
        (ModelKind::Lcpvae, ModelKind::Cvae),
        (ModelKind::Lcpvae, ModelKind::LcpvaeAblation),
        (ModelKind::LcpvaeAblation, ModelKind::Cvae),
    ];
    let deltas = pairs
        .iter()
        .map(|(a, b)| {
            (
                format!("{a}_vs_{b}"),
                MetricDelta::between(&models[a], &models[b]),
            )
        })
        .collect();
    let cmp = Comparison {
        dataset_hash: dataset.content_hash()?,
        seed: config.seed,
        eval_seed: opts.seed,
        models,
        deltas,
    };
    if let Some(d) = dir {
        write_json(&d.join(COMPARISON_FILE), &cmp)?;
    }
    Ok(cmp)
}
