//! Diagonal Gaussians, the two reparametrized samplers and closed-form KL.
//!
//! Graph-level functions operate on batches: a [`GaussianVars`] holds `[n, d]`
//! mean and log-std nodes, and every KL is summed over the `d` latent
//! dimensions and averaged over the `n` rows. [`DiagGaussian`] is the plain
//! value counterpart used at evaluation time.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Bounds applied by encoders to their log-std output.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// A diagonal Gaussian `N(mean, diag(exp(log_std))^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape(
                "DiagGaussian",
                format!("mean has {} dims, log_std {}", mean.len(), log_std.len()),
            ));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "DiagGaussian" });
        }
        Ok(DiagGaussian { mean, log_std })
    }

    /// From a mean and a standard deviation, flooring the std at `floor`.
    pub fn from_std(mean: Vec<f64>, std: &[f64], floor: f64) -> Result<Self> {
        let log_std = std.iter().map(|s| s.max(floor).ln()).collect();
        DiagGaussian::new(mean, log_std)
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn check_dim(&self, op: &'static str, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::shape(op, format!("{} vs {d} dims", self.dim())));
        }
        Ok(())
    }

    /// `mean + std * eps`.
    pub fn sample(&self, eps: &NoiseVector) -> Result<Vec<f64>> {
        self.check_dim("reparam_sample", eps.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(eps.values())
            .map(|((m, l), e)| m + l.exp() * e)
            .collect())
    }

    /// The primary posterior composed with a conditional one:
    /// `N(mu + sigma * mu_c, (sigma * sigma_c)^2)`.
    pub fn compose(&self, conditional: &DiagGaussian) -> Result<DiagGaussian> {
        conditional.check_dim("compose", self.dim())?;
        let mean = self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(&conditional.mean)
            .map(|((m, l), mc)| m + l.exp() * mc)
            .collect();
        let log_std = self
            .log_std
            .iter()
            .zip(&conditional.log_std)
            .map(|(a, b)| a + b)
            .collect();
        DiagGaussian::new(mean, log_std)
    }

    pub fn per_dim_kl_to_standard_normal(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| 0.5 * (m * m + (2.0 * l).exp() - 1.0) - l)
            .collect()
    }

    pub fn kl_to_standard_normal(&self) -> f64 {
        self.per_dim_kl_to_standard_normal().iter().sum()
    }

    /// Per-dimension terms of `KL(self || p)`.
    pub fn per_dim_kl(&self, p: &DiagGaussian) -> Result<Vec<f64>> {
        p.check_dim("kl_diag_gaussians", self.dim())?;
        Ok((0..self.dim())
            .map(|i| {
                let (qm, ql) = (self.mean[i], self.log_std[i]);
                let (pm, pl) = (p.mean[i], p.log_std[i]);
                let diff = qm - pm;
                (pl - ql) + ((2.0 * ql).exp() + diff * diff) / (2.0 * (2.0 * pl).exp()) - 0.5
            })
            .collect())
    }

    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        Ok(self.per_dim_kl(p)?.iter().sum())
    }
}

/// A standard-normal draw of latent dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn new(values: Vec<f64>) -> Self {
        NoiseVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        NoiseVector(vec![0.0; dim])
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        NoiseVector((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `[rows, dim]` tensor of standard-normal draws.
pub fn noise_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, dim], data).expect("standard normal draws are finite")
}

/// Batch of diagonal Gaussians as graph nodes, each `[n, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    /// Places a fixed batch of Gaussians into the graph as constants.
    pub fn constant(g: &mut Graph, rows: &[DiagGaussian]) -> Result<Self> {
        let mean = Tensor::from_rows(&rows.iter().map(|q| q.mean.clone()).collect::<Vec<_>>())?;
        let log_std =
            Tensor::from_rows(&rows.iter().map(|q| q.log_std.clone()).collect::<Vec<_>>())?;
        Ok(GaussianVars {
            mean: g.constant(mean),
            log_std: g.constant(log_std),
        })
    }

    pub fn stop_gradient(&self, g: &mut Graph) -> Result<Self> {
        Ok(GaussianVars {
            mean: g.stop_gradient(self.mean)?,
            log_std: g.stop_gradient(self.log_std)?,
        })
    }

    /// Reads the rows back out as plain values.
    pub fn to_values(&self, g: &Graph) -> Result<Vec<DiagGaussian>> {
        let m = g.value(self.mean);
        let l = g.value(self.log_std);
        (0..m.rows())
            .map(|i| DiagGaussian::new(m.row(i).to_vec(), l.row(i).to_vec()))
            .collect()
    }
}

fn batch_rows(shape: &[usize]) -> usize {
    if shape.len() == 2 {
        shape[0]
    } else {
        1
    }
}

fn same_shape(g: &Graph, op: &'static str, vars: &[Var]) -> Result<Vec<usize>> {
    let s = g.value(vars[0]).shape().to_vec();
    for v in &vars[1..] {
        if g.value(*v).shape() != s.as_slice() {
            return Err(Error::shape(
                op,
                format!("{s:?} vs {:?}", g.value(*v).shape()),
            ));
        }
    }
    Ok(s)
}

fn batch_mean_of_sum(g: &mut Graph, terms: Var) -> Result<Var> {
    let rows = batch_rows(g.value(terms).shape());
    let s = g.sum(terms)?;
    g.scale(s, 1.0 / rows as f64)
}

/// `z = mu + sigma * eps`.
pub fn reparam_sample(g: &mut Graph, q: &GaussianVars, eps: Var) -> Result<Var> {
    same_shape(g, "reparam_sample", &[q.mean, q.log_std, eps])?;
    let std = g.exp(q.log_std)?;
    let noise = g.mul(std, eps)?;
    g.add(q.mean, noise)
}

/// Posterior of the primary latent when its sampler is driven by the
/// conditional posterior: `N(mu + sigma * mu_c, (sigma * sigma_c)^2)`.
pub fn compose_posterior(
    g: &mut Graph,
    primary: &GaussianVars,
    conditional: &GaussianVars,
) -> Result<GaussianVars> {
    same_shape(
        g,
        "extended_reparam_sample",
        &[primary.mean, primary.log_std, conditional.mean, conditional.log_std],
    )?;
    let sigma = g.exp(primary.log_std)?;
    let shift = g.mul(sigma, conditional.mean)?;
    let mean = g.add(primary.mean, shift)?;
    let log_std = g.add(primary.log_std, conditional.log_std)?;
    Ok(GaussianVars { mean, log_std })
}

/// `z = (mu + sigma * mu_c) + (sigma * sigma_c) * eps`.
pub fn extended_reparam_sample(
    g: &mut Graph,
    primary: &GaussianVars,
    conditional: &GaussianVars,
    eps: Var,
) -> Result<Var> {
    let composed = compose_posterior(g, primary, conditional)?;
    reparam_sample(g, &composed, eps)
}

/// `KL(q || N(0, I))`, summed over dimensions, averaged over rows.
pub fn kl_to_standard_normal(g: &mut Graph, q: &GaussianVars) -> Result<Var> {
    same_shape(g, "kl_to_standard_normal", &[q.mean, q.log_std])?;
    let mu2 = g.square(q.mean)?;
    let two_ls = g.scale(q.log_std, 2.0)?;
    let var = g.exp(two_ls)?;
    let t = g.add(mu2, var)?;
    let t = g.add_scalar(t, -1.0)?;
    let t = g.scale(t, 0.5)?;
    let t = g.sub(t, q.log_std)?;
    batch_mean_of_sum(g, t)
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions, averaged
/// over rows.
pub fn kl_diag_gaussians(g: &mut Graph, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    same_shape(
        g,
        "kl_diag_gaussians",
        &[q.mean, q.log_std, p.mean, p.log_std],
    )?;
    let log_ratio = g.sub(p.log_std, q.log_std)?;
    let q2 = g.scale(q.log_std, 2.0)?;
    let q_var = g.exp(q2)?;
    let diff = g.sub(q.mean, p.mean)?;
    let diff2 = g.square(diff)?;
    let num = g.add(q_var, diff2)?;
    let neg_p2 = g.scale(p.log_std, -2.0)?;
    let inv_p_var = g.exp(neg_p2)?;
    let ratio = g.mul(num, inv_p_var)?;
    let ratio = g.scale(ratio, 0.5)?;
    let t = g.add(log_ratio, ratio)?;
    let t = g.add_scalar(t, -0.5)?;
    batch_mean_of_sum(g, t)
}

/// `KL(N(mu + sigma * mu_c, (sigma * sigma_c)^2) || N(mu_c, sigma_c^2))`.
///
/// The caller decides whether `conditional` is frozen.
pub fn cpvae_kl(g: &mut Graph, primary: &GaussianVars, conditional: &GaussianVars) -> Result<Var> {
    let composed = compose_posterior(g, primary, conditional)?;
    kl_diag_gaussians(g, &composed, conditional)
}

/// Batch-averaged KL of `q` against `N(0, I)`, split per latent dimension.
pub fn per_dim_kl_standard(rows: &[DiagGaussian]) -> Vec<f64> {
    average_rows(rows.iter().map(DiagGaussian::per_dim_kl_to_standard_normal))
}

pub(crate) fn average_rows(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        for (a, v) in acc.iter_mut().zip(&r) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}
