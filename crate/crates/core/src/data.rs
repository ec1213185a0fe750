//! Synthetic condition-labeled data.
//!
//! Each condition `k` has a center `m_k`; a sample is
//! `x = m_k + W u + noise` with `u ~ N(0, I)` of `within_factors` dims and a
//! single `W` shared by all conditions, so the directions of within-condition
//! variation are common and only the center identifies the condition.
//!
//! A simulated "pretrained embedding" per condition is produced alongside:
//! a random base vector plus per-sample jitter, averaged over the training
//! split. Its per-condition mean and spread feed the ablation model.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::models::{Batch, ConditionKind, ConditionTable, ConditionVector, LabeledSample};

pub const DATASET_VERSION: u32 = 1;
/// Floor applied to embedding spreads when they become a prior.
pub const STATS_STD_FLOOR: f64 = 1e-3;
const MAX_CENTER_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_conditions: usize,
    pub data_dim: usize,
    pub n_per_condition: usize,
    pub between_scale: f64,
    pub within_factors: usize,
    pub within_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub embedding_dim: usize,
    pub embedding_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_conditions: 4,
            data_dim: 16,
            n_per_condition: 500,
            between_scale: 6.0,
            within_factors: 2,
            within_scale: 1.0,
            noise_scale: 0.1,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            embedding_dim: 16,
            embedding_noise: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid data spec: {m}")));
        if self.num_conditions < 2 {
            return bad("need at least 2 conditions");
        }
        if self.within_factors < 1 || self.data_dim < self.within_factors {
            return bad("need data_dim >= within_factors >= 1");
        }
        if self.n_per_condition < 3 {
            return bad("need at least 3 samples per condition to fill every split");
        }
        if !(self.between_scale > 0.0 && self.within_scale >= 0.0 && self.noise_scale >= 0.0) {
            return bad("scales must be positive");
        }
        if self.embedding_dim == 0 || self.embedding_noise < 0.0 {
            return bad("embedding dim must be positive and noise non-negative");
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be positive and sum to 1");
        }
        Ok(())
    }

    /// Per-condition split sizes; every split gets at least one sample.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_per_condition;
        let val = ((n as f64 * self.split[1]).round() as usize).max(1);
        let test = ((n as f64 * self.split[2]).round() as usize).max(1);
        [n - val - test, val, test]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-condition embedding table (the averaged vectors) and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub dim: usize,
    pub noise: f64,
    pub table: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Embeddings {
    /// Mean and spread of each condition's embedding, truncated to the first
    /// `dim` coordinates, with the spread floored at [`STATS_STD_FLOOR`].
    pub fn stats(&self, dim: usize) -> Result<Vec<DiagGaussian>> {
        if dim == 0 || dim > self.dim {
            return Err(Error::Config(format!(
                "cannot take {dim} dims of a {}-dim embedding",
                self.dim
            )));
        }
        self.table
            .iter()
            .zip(&self.std)
            .map(|(m, s)| DiagGaussian::from_std(m[..dim].to_vec(), &s[..dim], STATS_STD_FLOOR))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub condition_id: usize,
    pub x: Vec<f64>,
    /// Row of the embedding table for this sample; embeddings are averaged
    /// per condition, so this equals `condition_id`.
    pub embedding_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: SynthSpec,
    seed: u64,
    split_indices: SplitIndices,
    embeddings: Embeddings,
    baseline_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: SynthSpec,
    records: Vec<Record>,
    splits: SplitIndices,
    embeddings: Embeddings,
    baseline_accuracy: f64,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (Euclidean). Ties go to the lower index.
pub fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Draws a dataset. Pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, dim, f) = (spec.num_conditions, spec.data_dim, spec.within_factors);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Shared variation directions: unit columns scaled by within_scale.
    let mut w = vec![vec![0.0; f]; dim];
    for j in 0..f {
        let col: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, v) in col.iter().enumerate() {
            w[i][j] = spec.within_scale * v / norm;
        }
    }

    let center_sd = spec.between_scale / (dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..MAX_CENTER_RETRIES {
            let c: Vec<f64> = (0..dim).map(|_| center_sd * normal(&mut rng)).collect();
            if centers
                .iter()
                .all(|o| dist2(o, &c).sqrt() >= spec.between_scale)
            {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place {k} centers {} apart in {MAX_CENTER_RETRIES} tries",
                spec.between_scale
            )));
        }
    }

    let mut records = Vec::with_capacity(k * spec.n_per_condition);
    for (cid, center) in centers.iter().enumerate() {
        for _ in 0..spec.n_per_condition {
            let u: Vec<f64> = (0..f).map(|_| normal(&mut rng)).collect();
            let x = (0..dim)
                .map(|i| {
                    let wu: f64 = w[i].iter().zip(&u).map(|(a, b)| a * b).sum();
                    center[i] + wu + spec.noise_scale * normal(&mut rng)
                })
                .collect();
            records.push(Record {
                condition_id: cid,
                x,
                embedding_id: cid,
            });
        }
    }

    let [n_train, n_val, _] = spec.split_sizes();
    let mut splits = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for cid in 0..k {
        let mut idx: Vec<usize> =
            (cid * spec.n_per_condition..(cid + 1) * spec.n_per_condition).collect();
        idx.shuffle(&mut rng);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.validation.extend_from_slice(&idx[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in [&mut splits.train, &mut splits.validation, &mut splits.test] {
        s.sort_unstable();
    }

    let mut ds = Dataset {
        spec: spec.clone(),
        records,
        splits,
        embeddings: Embeddings {
            dim: 0,
            noise: 0.0,
            table: vec![],
            std: vec![],
        },
        baseline_accuracy: 0.0,
    };
    ds.embeddings = make_embeddings(&ds, spec.embedding_dim, spec.embedding_noise);
    ds.baseline_accuracy = ds.raw_centroid_accuracy();
    Ok(ds)
}

/// Simulated pretrained embeddings: per condition a random base vector, per
/// training sample that vector plus `noise`-scaled jitter. The table holds
/// the per-condition average and `std` the per-dimension spread.
pub fn make_embeddings(ds: &Dataset, dim: usize, noise: f64) -> Embeddings {
    let k = ds.spec.num_conditions;
    let mut rng = ChaCha8Rng::seed_from_u64(ds.spec.seed);
    rng.set_stream(1);
    let base: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
        .collect();
    // Jitter is kept apart from the base so a noiseless table is exact.
    let mut jitter: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for &i in &ds.splits.train {
        let cid = ds.records[i].condition_id;
        jitter[cid].push((0..dim).map(|_| noise * normal(&mut rng)).collect());
    }
    let mut table = vec![vec![0.0; dim]; k];
    let mut std = vec![vec![0.0; dim]; k];
    for (cid, rows) in jitter.iter().enumerate() {
        let n = rows.len().max(1) as f64;
        for j in 0..dim {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n;
            table[cid][j] = base[cid][j] + m;
            std[cid][j] = var.sqrt();
        }
    }
    Embeddings {
        dim,
        noise,
        table,
        std,
    }
}

impl Dataset {
    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_conditions(&self) -> usize {
        self.spec.num_conditions
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn splits(&self) -> &SplitIndices {
        &self.splits
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        }
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    /// Nearest-centroid accuracy on raw test features, with centroids from
    /// the training split. Recorded at generation time.
    pub fn baseline_accuracy(&self) -> f64 {
        self.baseline_accuracy
    }

    pub fn condition_table(&self, kind: ConditionKind) -> Result<ConditionTable> {
        match kind {
            ConditionKind::OneHot => Ok(ConditionTable::one_hot(self.num_conditions())),
            ConditionKind::Embedding => ConditionTable::embeddings(&self.embeddings.table),
        }
    }

    pub fn labeled(&self, i: usize, kind: ConditionKind) -> Result<LabeledSample> {
        let r = self
            .records
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample {i} out of range")))?;
        let condition = match kind {
            ConditionKind::OneHot => ConditionVector::one_hot(r.condition_id, self.num_conditions())?,
            ConditionKind::Embedding => {
                ConditionVector::embedding(self.embeddings.table[r.embedding_id].clone())?
            }
        };
        Ok(LabeledSample {
            x: r.x.clone(),
            condition_id: r.condition_id,
            condition,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut data = Vec::with_capacity(indices.len() * self.data_dim());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample {i} out of range")))?;
            data.extend_from_slice(&r.x);
            ids.push(r.condition_id);
        }
        Ok(Batch {
            x: Tensor::new(vec![indices.len(), self.data_dim()], data)?,
            ids,
        })
    }

    /// Per-condition mean of raw features over a split.
    pub fn centroids(&self, which: Split) -> Vec<Vec<f64>> {
        let k = self.num_conditions();
        let mut sum = vec![vec![0.0; self.data_dim()]; k];
        let mut count = vec![0usize; k];
        for &i in self.split(which) {
            let r = &self.records[i];
            count[r.condition_id] += 1;
            for (s, v) in sum[r.condition_id].iter_mut().zip(&r.x) {
                *s += v;
            }
        }
        for (s, n) in sum.iter_mut().zip(count) {
            for v in s.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        sum
    }

    pub fn raw_centroid_accuracy(&self) -> f64 {
        let centroids = self.centroids(Split::Train);
        let test = self.split(Split::Test);
        let hits = test
            .iter()
            .filter(|&&i| {
                let r = &self.records[i];
                nearest_centroid(&centroids, &r.x) == r.condition_id
            })
            .count();
        hits as f64 / test.len() as f64
    }

    fn header(&self) -> Header {
        Header {
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            seed: self.spec.seed,
            split_indices: self.splits.clone(),
            embeddings: self.embeddings.clone(),
            baseline_accuracy: self.baseline_accuracy,
        }
    }

    /// JSON-lines text: header line, then one record per sample.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header())?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema = |detail: String| Error::Schema {
            path: path.to_path_buf(),
            detail,
        };
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| schema("empty file".into()))??;
        let probe: serde_json::Value =
            serde_json::from_str(&first).map_err(|e| schema(format!("header: {e}")))?;
        let version = probe
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| schema("header lacks version".into()))?;
        if version != u64::from(DATASET_VERSION) {
            return Err(Error::Version {
                found: version as u32,
                expected: DATASET_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(probe).map_err(|e| schema(format!("header: {e}")))?;
        header.spec.validate()?;
        let spec = header.spec;
        let mut records = Vec::with_capacity(spec.num_conditions * spec.n_per_condition);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| schema(format!("record {n}: {e}")))?;
            if r.condition_id >= spec.num_conditions
                || r.x.len() != spec.data_dim
                || r.embedding_id >= header.embeddings.table.len()
                || r.x.iter().any(|v| !v.is_finite())
            {
                return Err(schema(format!("record {n} violates the header spec")));
            }
            records.push(r);
        }
        let expected = spec.num_conditions * spec.n_per_condition;
        if records.len() != expected {
            return Err(schema(format!(
                "truncated: {} records, expected {expected}",
                records.len()
            )));
        }
        let mut seen = vec![false; expected];
        for &i in header
            .split_indices
            .train
            .iter()
            .chain(&header.split_indices.validation)
            .chain(&header.split_indices.test)
        {
            if i >= expected || std::mem::replace(&mut seen[i], true) {
                return Err(schema(format!("split index {i} invalid or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(schema("splits do not cover every sample".into()));
        }
        if header.embeddings.table.len() != spec.num_conditions {
            return Err(schema("embedding table size".into()));
        }
        Ok(Dataset {
            spec,
            records,
            splits: header.split_indices,
            embeddings: header.embeddings,
            baseline_accuracy: header.baseline_accuracy,
        })
    }
}
