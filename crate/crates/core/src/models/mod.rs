//! The model graphs: VAE, conditional VAE, the learned-conditional-prior VAE
//! (a secondary VAE over the condition vector whose posterior drives the
//! primary sampler) and its ablation that substitutes fixed per-condition
//! statistics for the secondary VAE.
//!
//! All four share the same primary encoder/decoder layout. With `C` the
//! condition width, `D` the observation width and `d` the latent width:
//!
//! | kind              | encoder input | decoder input | secondary VAE  |
//! |-------------------|---------------|---------------|----------------|
//! | `vae`             | `D`           | `d`           | none           |
//! | `cvae`            | `D + C`       | `d + C`       | none           |
//! | `lcpvae`          | `D + C`       | `d + C`       | `C -> d -> C`  |
//! | `lcpvae_ablation` | `D + C`       | `d + C`       | fixed stats    |

mod checkpoint;
mod condition;
mod mlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use condition::{ConditionKind, ConditionTable, ConditionVector, LabeledSample};
pub use mlp::{MlpBlock, ParamSet};

use crate::autodiff::{Graph, Tensor, Var};
use crate::distributions::{
    extended_reparam_sample, reparam_sample, DiagGaussian, GaussianVars,
};
use crate::error::{Error, Result};

pub const CSVAE_PREFIX: &str = "csvae_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    Cvae,
    Lcpvae,
    LcpvaeAblation,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Vae,
        ModelKind::Cvae,
        ModelKind::Lcpvae,
        ModelKind::LcpvaeAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Cvae => "cvae",
            ModelKind::Lcpvae => "lcpvae",
            ModelKind::LcpvaeAblation => "lcpvae_ablation",
        }
    }

    pub fn is_conditional(self) -> bool {
        self != ModelKind::Vae
    }

    /// Whether the primary sampler uses a per-condition prior.
    pub fn has_conditional_prior(self) -> bool {
        matches!(self, ModelKind::Lcpvae | ModelKind::LcpvaeAblation)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

/// Which gradient paths into the secondary VAE are cut.
///
/// `KlOnly` freezes its posterior inside the primary KL term only; `Full`
/// also freezes it on the sampling path that feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    #[default]
    KlOnly,
    Full,
}

/// Where inference latents come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// `z ~ N(0, I)`.
    Prior,
    /// `z` from the per-condition posterior (secondary VAE or fixed stats).
    #[default]
    ConditionalPosterior,
}

impl SampleMode {
    pub fn default_for(kind: ModelKind) -> SampleMode {
        if kind.has_conditional_prior() {
            SampleMode::ConditionalPosterior
        } else {
            SampleMode::Prior
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub primary_hidden: Vec<usize>,
    pub csvae_hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(kind: ModelKind, data_dim: usize, latent_dim: usize) -> Self {
        Architecture {
            kind,
            data_dim,
            latent_dim,
            primary_hidden: vec![64, 64],
            csvae_hidden: vec![32],
        }
    }

    pub fn with_hidden(mut self, primary: Vec<usize>, csvae: Vec<usize>) -> Self {
        self.primary_hidden = primary;
        self.csvae_hidden = csvae;
        self
    }
}

/// A mini-batch: observations `[n, D]` and their condition ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub ids: Vec<usize>,
}

/// Frozen noise for one forward pass, each `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub primary: Tensor,
    pub conditional: Tensor,
}

impl BatchNoise {
    pub fn draw<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Self {
        let primary = crate::distributions::noise_tensor(rng, rows, dim);
        let conditional = crate::distributions::noise_tensor(rng, rows, dim);
        BatchNoise {
            primary,
            conditional,
        }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        BatchNoise {
            primary: Tensor::zeros(&[rows, dim]),
            conditional: Tensor::zeros(&[rows, dim]),
        }
    }
}

/// Graph nodes produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub reconstruction: Var,
    pub primary_posterior: GaussianVars,
    /// Secondary VAE posterior (`lcpvae`) or fixed statistics (ablation).
    pub conditional_posterior: Option<GaussianVars>,
    pub latent: Var,
    pub csvae_latent: Option<Var>,
    pub csvae_reconstruction: Option<Var>,
}

/// Values read back from a forward pass with frozen weights.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub primary_posterior: Vec<DiagGaussian>,
    pub conditional_posterior: Option<Vec<DiagGaussian>>,
    pub latent: Tensor,
    pub csvae_latent: Option<Tensor>,
    pub reconstruction: Tensor,
}

/// Latents and decoder outputs from [`Model::infer_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub latent: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    seed: u64,
    conditions: ConditionTable,
    condition_stats: Option<Vec<DiagGaussian>>,
    params: ParamSet,
    encoder: MlpBlock,
    decoder: MlpBlock,
    csvae_encoder: Option<MlpBlock>,
    csvae_decoder: Option<MlpBlock>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl Model {
    /// Builds a model with freshly initialized weights.
    ///
    /// `condition_stats` is required for the ablation (one Gaussian of
    /// latent width per condition) and ignored otherwise.
    pub fn new(
        arch: Architecture,
        conditions: ConditionTable,
        condition_stats: Option<Vec<DiagGaussian>>,
        seed: u64,
    ) -> Result<Self> {
        let d = arch.latent_dim;
        if d == 0 || arch.data_dim == 0 {
            return Err(Error::Config("latent and data dims must be positive".into()));
        }
        if arch.kind.is_conditional() && conditions.num_conditions() == 0 {
            return Err(Error::Config("conditional model needs conditions".into()));
        }
        let condition_stats = match arch.kind {
            ModelKind::LcpvaeAblation => {
                let stats = condition_stats.ok_or_else(|| {
                    Error::Config("ablation needs per-condition statistics".into())
                })?;
                if stats.len() != conditions.num_conditions() {
                    return Err(Error::Config(format!(
                        "{} condition statistics for {} conditions",
                        stats.len(),
                        conditions.num_conditions()
                    )));
                }
                if let Some(bad) = stats.iter().find(|s| s.dim() != d) {
                    return Err(Error::shape(
                        "ablation_forward",
                        format!("statistics have {} dims, latent has {d}", bad.dim()),
                    ));
                }
                Some(stats)
            }
            _ => None,
        };
        let c = if arch.kind.is_conditional() {
            conditions.dim()
        } else {
            0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = MlpBlock::encoder(
            "encoder",
            &widths(arch.data_dim + c, &arch.primary_hidden, 2 * d),
            &mut params,
            &mut rng,
        )?;
        let decoder = MlpBlock::new(
            "decoder",
            &widths(d + c, &arch.primary_hidden, arch.data_dim),
            &mut params,
            &mut rng,
        )?;
        let (csvae_encoder, csvae_decoder) = if arch.kind == ModelKind::Lcpvae {
            // Equal latent widths are what make the elementwise extended trick defined.
            let enc = MlpBlock::encoder(
                &format!("{CSVAE_PREFIX}encoder"),
                &widths(c, &arch.csvae_hidden, 2 * d),
                &mut params,
                &mut rng,
            )?;
            let dec = MlpBlock::new(
                &format!("{CSVAE_PREFIX}decoder"),
                &widths(d, &arch.csvae_hidden, c),
                &mut params,
                &mut rng,
            )?;
            (Some(enc), Some(dec))
        } else {
            (None, None)
        };
        Ok(Model {
            arch,
            seed,
            conditions,
            condition_stats,
            params,
            encoder,
            decoder,
            csvae_encoder,
            csvae_decoder,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn conditions(&self) -> &ConditionTable {
        &self.conditions
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.num_conditions()
    }

    pub fn condition_stats(&self) -> Option<&[DiagGaussian]> {
        self.condition_stats.as_deref()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &MlpBlock {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpBlock {
        &self.decoder
    }

    /// Parameter indices belonging to the secondary VAE.
    pub fn csvae_param_indices(&self) -> Vec<usize> {
        self.params.indices_with_prefix(CSVAE_PREFIX)
    }

    fn csvae(&self) -> Result<(&MlpBlock, &MlpBlock)> {
        match (&self.csvae_encoder, &self.csvae_decoder) {
            (Some(e), Some(d)) => Ok((e, d)),
            _ => Err(Error::Incompatible(format!(
                "{} has no secondary VAE",
                self.kind()
            ))),
        }
    }

    fn check_rows(&self, g: &Graph, op: &'static str, v: Var, width: usize) -> Result<usize> {
        let s = g.value(v).shape();
        if s.len() != 2 || s[1] != width {
            return Err(Error::shape(op, format!("expected [n, {width}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// Unconditional VAE: `q(z|x)`, `z = mu + sigma * eps`, `decode(z)`.
    pub fn vae_forward(&self, g: &mut Graph, p: &[Var], x: Var, eps: Var) -> Result<ModelOutput> {
        let posterior = self.encoder.encode(g, p, x)?;
        let latent = reparam_sample(g, &posterior, eps)?;
        let reconstruction = self.decoder.forward(g, p, latent)?;
        Ok(ModelOutput {
            reconstruction,
            primary_posterior: posterior,
            conditional_posterior: None,
            latent,
            csvae_latent: None,
            csvae_reconstruction: None,
        })
    }

    /// Conditional VAE: the condition is concatenated to both the encoder
    /// and decoder inputs.
    pub fn cvae_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        c: Var,
        eps: Var,
    ) -> Result<ModelOutput> {
        let xc = g.concat(&[x, c], 1)?;
        let posterior = self.encoder.encode(g, p, xc)?;
        let latent = reparam_sample(g, &posterior, eps)?;
        let zc = g.concat(&[latent, c], 1)?;
        let reconstruction = self.decoder.forward(g, p, zc)?;
        Ok(ModelOutput {
            reconstruction,
            primary_posterior: posterior,
            conditional_posterior: None,
            latent,
            csvae_latent: None,
            csvae_reconstruction: None,
        })
    }

    /// Hierarchical model. The secondary VAE encodes the condition alone;
    /// its posterior drives the primary sampler through the extended
    /// reparametrization `z = (mu + sigma * mu_c) + (sigma * sigma_c) * eps`.
    pub fn lcpvae_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        c: Var,
        eps_primary: Var,
        eps_cond: Var,
        freeze: FreezeScope,
    ) -> Result<ModelOutput> {
        let (cs_enc, cs_dec) = self.csvae()?;
        let conditional = cs_enc.encode(g, p, c)?;
        let z_c = reparam_sample(g, &conditional, eps_cond)?;
        let csvae_reconstruction = cs_dec.forward(g, p, z_c)?;

        let xc = g.concat(&[x, c], 1)?;
        let primary = self.encoder.encode(g, p, xc)?;
        let prior = match freeze {
            FreezeScope::KlOnly => conditional,
            FreezeScope::Full => conditional.stop_gradient(g)?,
        };
        let latent = extended_reparam_sample(g, &primary, &prior, eps_primary)?;
        let zc = g.concat(&[latent, c], 1)?;
        let reconstruction = self.decoder.forward(g, p, zc)?;
        Ok(ModelOutput {
            reconstruction,
            primary_posterior: primary,
            conditional_posterior: Some(conditional),
            latent,
            csvae_latent: Some(z_c),
            csvae_reconstruction: Some(csvae_reconstruction),
        })
    }

    /// Ablation: fixed per-row statistics take the place of the secondary
    /// VAE posterior in the extended reparametrization.
    pub fn ablation_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        c: Var,
        c_stats: &GaussianVars,
        eps: Var,
    ) -> Result<ModelOutput> {
        let d = self.latent_dim();
        let n = self.check_rows(g, "ablation_forward", c_stats.mean, d)?;
        if g.value(c_stats.log_std).shape() != [n, d] {
            return Err(Error::shape("ablation_forward", "statistics mean/std differ"));
        }
        let xc = g.concat(&[x, c], 1)?;
        let primary = self.encoder.encode(g, p, xc)?;
        let latent = extended_reparam_sample(g, &primary, c_stats, eps)?;
        let zc = g.concat(&[latent, c], 1)?;
        let reconstruction = self.decoder.forward(g, p, zc)?;
        Ok(ModelOutput {
            reconstruction,
            primary_posterior: primary,
            conditional_posterior: Some(*c_stats),
            latent,
            csvae_latent: None,
            csvae_reconstruction: None,
        })
    }

    /// Rows of the ablation statistics for the given condition ids.
    pub fn stats_for(&self, ids: &[usize]) -> Result<Vec<DiagGaussian>> {
        let stats = self
            .condition_stats
            .as_ref()
            .ok_or_else(|| Error::Incompatible(format!("{} has no statistics", self.kind())))?;
        ids.iter()
            .map(|&i| {
                stats
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("condition {i} out of range")))
            })
            .collect()
    }

    /// Forward pass for any kind, building inputs from a batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        batch: &Batch,
        noise: &BatchNoise,
        freeze: FreezeScope,
    ) -> Result<ModelOutput> {
        let n = batch.ids.len();
        if batch.x.shape() != [n, self.data_dim()] {
            return Err(Error::shape(
                "forward",
                format!(
                    "x is {:?}, expected [{n}, {}]",
                    batch.x.shape(),
                    self.data_dim()
                ),
            ));
        }
        let d = self.latent_dim();
        if noise.primary.shape() != [n, d] || noise.conditional.shape() != [n, d] {
            return Err(Error::shape("forward", "noise shape"));
        }
        let x = g.constant(batch.x.clone());
        let eps = g.constant(noise.primary.clone());
        if self.kind() == ModelKind::Vae {
            return self.vae_forward(g, p, x, eps);
        }
        let c = g.constant(self.conditions.tensor(&batch.ids)?);
        match self.kind() {
            ModelKind::Vae => unreachable!(),
            ModelKind::Cvae => self.cvae_forward(g, p, x, c, eps),
            ModelKind::Lcpvae => {
                let eps_c = g.constant(noise.conditional.clone());
                self.lcpvae_forward(g, p, x, c, eps, eps_c, freeze)
            }
            ModelKind::LcpvaeAblation => {
                let stats = GaussianVars::constant(g, &self.stats_for(&batch.ids)?)?;
                self.ablation_forward(g, p, x, c, &stats, eps)
            }
        }
    }

    /// Runs [`Model::forward`] with constant weights and reads values back.
    pub fn encode(&self, batch: &Batch, noise: &BatchNoise) -> Result<Encoded> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let out = self.forward(&mut g, &p, batch, noise, FreezeScope::KlOnly)?;
        Ok(Encoded {
            primary_posterior: out.primary_posterior.to_values(&g)?,
            conditional_posterior: out
                .conditional_posterior
                .map(|c| c.to_values(&g))
                .transpose()?,
            latent: g.value(out.latent).clone(),
            csvae_latent: out.csvae_latent.map(|v| g.value(v).clone()),
            reconstruction: g.value(out.reconstruction).clone(),
        })
    }

    /// Posterior of the secondary VAE for each condition id.
    pub fn conditional_posterior(&self, ids: &[usize]) -> Result<Vec<DiagGaussian>> {
        match self.kind() {
            ModelKind::Lcpvae => {
                let (enc, _) = self.csvae()?;
                let mut g = Graph::new();
                let p = self.params.bind_constant(&mut g);
                let c = g.constant(self.conditions.tensor(ids)?);
                enc.encode(&mut g, &p, c)?.to_values(&g)
            }
            ModelKind::LcpvaeAblation => self.stats_for(ids),
            k => Err(Error::Incompatible(format!(
                "{k} has no conditional posterior"
            ))),
        }
    }

    /// Generates one output per row of `eps` (`[n, d]`) for the condition
    /// ids in `ids`.
    ///
    /// In `Prior` mode `z = eps`. In `ConditionalPosterior` mode
    /// `z = mu_c + sigma_c * eps` with the posterior of the secondary VAE
    /// (or the fixed statistics for the ablation); VAE and CVAE have no such
    /// posterior and reject that mode. The decoder receives `concat(z, c)`.
    pub fn infer_sample(&self, ids: &[usize], eps: &Tensor, mode: SampleMode) -> Result<Generated> {
        let n = ids.len();
        let d = self.latent_dim();
        if eps.shape() != [n, d] {
            return Err(Error::shape(
                "infer_sample",
                format!("eps is {:?}, expected [{n}, {d}]", eps.shape()),
            ));
        }
        if self.kind().is_conditional() {
            for &id in ids {
                self.conditions.get(id)?;
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let e = g.constant(eps.clone());
        let latent = match mode {
            SampleMode::Prior => e,
            SampleMode::ConditionalPosterior => {
                if !self.kind().has_conditional_prior() {
                    return Err(Error::Incompatible(format!(
                        "{} samples from the standard normal prior only",
                        self.kind()
                    )));
                }
                let post = self.conditional_posterior(ids)?;
                let q = GaussianVars::constant(&mut g, &post)?;
                reparam_sample(&mut g, &q, e)?
            }
        };
        let dec_in = if self.kind().is_conditional() {
            let c = g.constant(self.conditions.tensor(ids)?);
            g.concat(&[latent, c], 1)?
        } else {
            latent
        };
        let output = self.decoder.forward(&mut g, &p, dec_in)?;
        Ok(Generated {
            latent: g.value(latent).clone(),
            output: g.value(output).clone(),
        })
    }
}

#[cfg(test)]
mod tests;
