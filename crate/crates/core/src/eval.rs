//! Latent-space structure and generation metrics: silhouette, intra/inter
//! distance ratio, nearest-centroid condition accuracy, per-dimension KL,
//! output variability and a PCA projection for plotting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{nearest_centroid, Dataset, Split};
use crate::distributions::{average_rows, noise_tensor, DiagGaussian};
use crate::error::{Error, Result};
use crate::models::{BatchNoise, Generated, Model, ModelKind, SampleMode};

/// Dimensions whose mean KL exceeds this are counted as active.
pub const ACTIVE_DIM_THRESHOLD: f64 = 0.01;

const ENCODE_STREAM: u64 = 5;
const SAMPLE_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    EncoderPosterior,
    InferenceSample,
}

impl LatentSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentSource::EncoderPosterior => "encoder_posterior",
            LatentSource::InferenceSample => "inference_sample",
        }
    }
}

impl std::str::FromStr for LatentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_posterior" => Ok(LatentSource::EncoderPosterior),
            "inference_sample" => Ok(LatentSource::InferenceSample),
            _ => Err(Error::Data(format!("unknown latent source `{s}`"))),
        }
    }
}

/// Which latent space is dumped: the primary latent or the secondary
/// VAE's latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpSpace {
    #[default]
    Primary,
    Csvae,
}

impl std::str::FromStr for DumpSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(DumpSpace::Primary),
            "csvae" => Ok(DumpSpace::Csvae),
            _ => Err(Error::Config(format!("unknown dump space `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub condition_id: usize,
    pub source: LatentSource,
    pub z: Vec<f64>,
}

/// Latent vectors tagged with their condition and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub model: ModelKind,
    pub seed: u64,
    rows: Vec<LatentRow>,
}

impl LatentDump {
    pub fn new(model: ModelKind, seed: u64, rows: Vec<LatentRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.z.len();
            if d == 0 || rows.iter().any(|r| r.z.len() != d) {
                return Err(Error::Data("latent rows differ in length".into()));
            }
        }
        Ok(LatentDump { model, seed, rows })
    }

    pub fn rows(&self) -> &[LatentRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z.len())
    }

    /// Rows from one source only.
    pub fn filter(&self, source: LatentSource) -> LatentDump {
        LatentDump {
            model: self.model,
            seed: self.seed,
            rows: self.rows.iter().filter(|r| r.source == source).cloned().collect(),
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.z.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.condition_id).collect()
    }

    pub fn silhouette(&self) -> Result<f64> {
        silhouette(&self.points(), &self.labels())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["condition_id".to_string(), "source".to_string()];
        header.extend((0..self.dim()).map(|j| format!("z_{j}")));
        w.write_record(&header).map_err(csv_error)?;
        for r in &self.rows {
            let mut rec = vec![r.condition_id.to_string(), r.source.as_str().to_string()];
            rec.extend(r.z.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Parses the CSV form. The model tag and seed are not part of it.
    pub fn from_csv(model: ModelKind, seed: u64, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_error)?.clone();
        let ok = header.len() >= 3
            && &header[0] == "condition_id"
            && &header[1] == "source"
            && (2..header.len()).all(|j| header[j] == format!("z_{}", j - 2));
        if !ok {
            return Err(Error::Data(format!("bad latent dump header `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let bad = |i: usize, what: &str| Error::Data(format!("latent dump row {}: {what}", i + 1));
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let z = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| bad(i, "bad number")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LatentRow {
                condition_id: rec[0].parse().map_err(|_| bad(i, "bad condition id"))?,
                source: rec[1].parse()?,
                z,
            });
        }
        LatentDump::new(model, seed, rows)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("latent dump: {e}"))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

fn check_clusters(points: &[Vec<f64>], labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if points.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let g = groups(labels);
    if g.len() < 2 {
        return Err(Error::Degenerate("need at least two conditions".into()));
    }
    if let Some((l, _)) = g.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Degenerate(format!("condition {l} has a single point")));
    }
    Ok(g)
}

/// Mean silhouette coefficient with Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let g = check_clusters(points, labels)?;
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (&l, members) in &g {
            let s: f64 = members.iter().map(|&j| distance(p, &points[j])).sum();
            if l == labels[i] {
                a = s / (members.len() - 1) as f64;
            } else {
                b = b.min(s / members.len() as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Mean within-condition pairwise distance over mean between-condition
/// pairwise distance.
pub fn intra_inter_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_clusters(points, labels)?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = distance(&points[i], &points[j]);
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let inter = inter / n_inter as f64;
    if inter == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    Ok(intra / n_intra as f64 / inter)
}

/// Fraction of outputs whose nearest centroid is the requested condition.
pub fn condition_accuracy(generated: &[(usize, Vec<f64>)], centroids: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Degenerate("no generated samples".into()));
    }
    let mut hits = 0usize;
    for (k, x) in generated {
        if *k >= centroids.len() {
            return Err(Error::Data(format!(
                "condition {k} out of range for {} centroids",
                centroids.len()
            )));
        }
        if nearest_centroid(centroids, x) == *k {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Batch-averaged KL of the primary posterior against its prior, one
/// entry per latent dimension. The prior is the standard normal for the VAE
/// and CVAE and the conditional posterior otherwise, matching the training
/// loss term.
pub fn per_dim_kl(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let batch = dataset.batch(indices)?;
    let enc = model.encode(&batch, &BatchNoise::zeros(indices.len(), model.latent_dim()))?;
    per_dim_kl_of(&enc.primary_posterior, enc.conditional_posterior.as_deref())
}

/// Per-dimension KL of explicit posteriors, optionally against per-row
/// conditional priors.
pub fn per_dim_kl_of(
    primary: &[DiagGaussian],
    conditional: Option<&[DiagGaussian]>,
) -> Result<Vec<f64>> {
    match conditional {
        None => Ok(average_rows(
            primary.iter().map(DiagGaussian::per_dim_kl_to_standard_normal),
        )),
        Some(c) => {
            if c.len() != primary.len() {
                return Err(Error::Data("posterior and prior counts differ".into()));
            }
            let rows = primary
                .iter()
                .zip(c)
                .map(|(q, p)| q.compose(p)?.per_dim_kl(p))
                .collect::<Result<Vec<_>>>()?;
            Ok(average_rows(rows.into_iter()))
        }
    }
}

pub fn active_dims(per_dim: &[f64]) -> usize {
    per_dim.iter().filter(|v| **v > ACTIVE_DIM_THRESHOLD).count()
}

/// `n` samples for condition `k` with seeded noise.
pub fn generate_for_condition(
    model: &Model,
    condition: usize,
    n: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM_BASE + condition as u64);
    let eps = noise_tensor(&mut rng, n, model.latent_dim());
    model.infer_sample(&vec![condition; n], &eps, mode)
}

/// Mean over dimensions of the per-dimension sample standard deviation.
pub fn variability(outputs: &Tensor) -> Result<f64> {
    let n = outputs.rows();
    if n < 2 {
        return Err(Error::Degenerate("variability needs at least two samples".into()));
    }
    let d = outputs.cols();
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| outputs.row(i)[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// Spread of decoder outputs for one condition across noise draws.
pub fn output_variability(
    model: &Model,
    condition: usize,
    n: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::Degenerate("variability needs at least two samples".into()));
    }
    variability(&generate_for_condition(model, condition, n, seed, mode)?.output)
}

/// Centers the points and projects them onto the top `out_dims` principal
/// directions. Each direction is signed so that its largest-magnitude
/// component is positive.
pub fn pca_project(points: &[Vec<f64>], out_dims: usize) -> Result<Vec<Vec<f64>>> {
    if points.len() < 2 || points.len() < out_dims {
        return Err(Error::Degenerate(format!(
            "cannot project {} points to {out_dims} dims",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Data("points differ in length".into()));
    }
    if out_dims == 0 || out_dims > d {
        return Err(Error::Config(format!("cannot project {d} dims to {out_dims}")));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let cov = DMatrix::from_fn(d, d, |i, j| {
        centered.iter().map(|p| p[i] * p[j]).sum::<f64>() / (n - 1.0)
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues[order[0]] <= 0.0 {
        return Err(Error::Degenerate("points have zero variance".into()));
    }
    let dirs: Vec<Vec<f64>> = order
        .iter()
        .take(out_dims)
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let k = (0..d)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                .unwrap_or(0);
            if v[k] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(centered
        .iter()
        .map(|p| {
            dirs.iter()
                .map(|v| p.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub space: DumpSpace,
    pub split: Split,
    pub samples_per_condition: usize,
    pub seed: u64,
    /// Defaults to the model's natural mode.
    pub mode: Option<SampleMode>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            space: DumpSpace::Primary,
            split: Split::Test,
            samples_per_condition: 100,
            seed: 0,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub model_seed: u64,
    pub eval_seed: u64,
    pub dump_space: DumpSpace,
    pub sample_mode: SampleMode,
    pub split: Split,
    pub samples_per_condition: usize,
    /// Silhouette of the inference samples in the dumped space.
    pub silhouette: f64,
    /// Silhouette of the encoded split in the dumped space; `None` when the
    /// split is too small (a condition with fewer than two points).
    pub posterior_silhouette: Option<f64>,
    pub intra_inter_ratio: f64,
    pub condition_accuracy: f64,
    pub per_dim_kl: Vec<f64>,
    pub active_dims: usize,
    pub per_condition_output_variability: Vec<f64>,
    pub mean_output_variability: f64,
    pub dataset_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub dump: LatentDump,
}

/// Encodes a split, draws inference samples for every condition and
/// computes the report. Deterministic in `(model, dataset, options)`.
pub fn evaluate(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let kind = model.kind();
    let k = model.num_conditions().max(dataset.num_conditions());
    if opts.samples_per_condition < 2 {
        return Err(Error::Config("need at least two samples per condition".into()));
    }
    if opts.space == DumpSpace::Csvae && kind != ModelKind::Lcpvae {
        return Err(Error::Incompatible(format!("{kind} has no secondary latent space")));
    }
    let mode = match opts.space {
        DumpSpace::Csvae => SampleMode::ConditionalPosterior,
        DumpSpace::Primary => opts.mode.unwrap_or_else(|| SampleMode::default_for(kind)),
    };

    let idx = dataset.split(opts.split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{:?} split is empty", opts.split)));
    }
    let batch = dataset.batch(idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(ENCODE_STREAM);
    let noise = BatchNoise::draw(&mut rng, idx.len(), model.latent_dim());
    let enc = model.encode(&batch, &noise)?;
    let encoded = match opts.space {
        DumpSpace::Primary => enc.latent.clone(),
        DumpSpace::Csvae => enc
            .csvae_latent
            .clone()
            .ok_or_else(|| Error::Incompatible("no secondary latent".into()))?,
    };
    let mut rows: Vec<LatentRow> = batch
        .ids
        .iter()
        .enumerate()
        .map(|(i, &c)| LatentRow {
            condition_id: c,
            source: LatentSource::EncoderPosterior,
            z: encoded.row(i).to_vec(),
        })
        .collect();

    let centroids = dataset.centroids(Split::Train);
    let mut generated = Vec::new();
    let mut per_condition = Vec::with_capacity(k);
    for c in 0..k {
        let g = generate_for_condition(model, c, opts.samples_per_condition, opts.seed, mode)?;
        per_condition.push(variability(&g.output)?);
        for i in 0..g.latent.rows() {
            rows.push(LatentRow {
                condition_id: c,
                source: LatentSource::InferenceSample,
                z: g.latent.row(i).to_vec(),
            });
            generated.push((c, g.output.row(i).to_vec()));
        }
    }
    let dump = LatentDump::new(kind, model.seed(), rows)?;
    let samples = dump.filter(LatentSource::InferenceSample);
    let posterior = dump.filter(LatentSource::EncoderPosterior);
    let per_dim = per_dim_kl_of(&enc.primary_posterior, enc.conditional_posterior.as_deref())?;
    let report = EvalReport {
        model: kind,
        model_seed: model.seed(),
        eval_seed: opts.seed,
        dump_space: opts.space,
        sample_mode: mode,
        split: opts.split,
        samples_per_condition: opts.samples_per_condition,
        silhouette: samples.silhouette()?,
        posterior_silhouette: match posterior.silhouette() {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        },
        intra_inter_ratio: intra_inter_ratio(&samples.points(), &samples.labels())?,
        condition_accuracy: condition_accuracy(&generated, &centroids)?,
        active_dims: active_dims(&per_dim),
        per_dim_kl: per_dim,
        mean_output_variability: per_condition.iter().sum::<f64>() / per_condition.len() as f64,
        per_condition_output_variability: per_condition,
        dataset_hash: dataset.content_hash()?,
    };
    Ok(Evaluation { report, dump })
}

#[cfg(test)]
mod tests;
