//! Loss assembly, KL annealing, the Adam optimizer and the seeded training
//! loop shared by all model kinds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::distributions::{cpvae_kl, kl_to_standard_normal, GaussianVars};
use crate::error::{Error, Result};
use crate::models::{Batch, BatchNoise, FreezeScope, Model, ModelKind, ModelOutput};

/// Seed streams derived from the run seed. Weight init uses stream 0.
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealShape {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub shape: AnnealShape,
    pub warmup_steps: u64,
    pub start_step: u64,
    pub max_weight: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            shape: AnnealShape::Linear,
            warmup_steps: 2000,
            start_step: 500,
            max_weight: 1.0,
        }
    }
}

/// Steepness of the sigmoid ramp over the warmup window.
const SIGMOID_SHARPNESS: f64 = 10.0;

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("anneal warmup_steps must be positive".into()));
        }
        if !(self.max_weight > 0.0 && self.max_weight <= 1.0) {
            return Err(Error::Config(format!(
                "anneal max_weight {} is outside (0, 1]",
                self.max_weight
            )));
        }
        Ok(())
    }

    /// KL weight at `step`: zero before `start_step`, rising to
    /// `max_weight` over `warmup_steps`, constant afterwards.
    pub fn weight(&self, step: u64) -> f64 {
        if step < self.start_step {
            return 0.0;
        }
        let t = ((step - self.start_step) as f64 / self.warmup_steps as f64).min(1.0);
        let ramp = match self.shape {
            AnnealShape::Linear => t,
            AnnealShape::Sigmoid => {
                // Logistic rescaled to pass exactly through 0 and 1.
                let a = SIGMOID_SHARPNESS;
                let lo = logistic(-a / 2.0);
                let hi = logistic(a / 2.0);
                ((logistic(a * (t - 0.5)) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        };
        self.max_weight * ramp
    }
}

pub fn anneal_weight(schedule: &AnnealSchedule, step: u64) -> f64 {
    schedule.weight(step)
}

/// Scalar loss terms of one step. Terms a model does not have are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_primary: f64,
    pub recon_csvae: f64,
    pub kl_primary: f64,
    pub kl_csvae: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// `lambda * (kl_csvae + kl_primary) + recon_csvae + recon_primary`,
    /// evaluated in the same order as the graph.
    pub fn recomposed_total(&self) -> f64 {
        (self.kl_csvae + self.kl_primary) * self.lambda + self.recon_csvae + self.recon_primary
    }
}

/// Graph nodes of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub recon_primary: Var,
    pub recon_csvae: Option<Var>,
    pub kl_primary: Var,
    pub kl_csvae: Option<Var>,
    pub lambda: f64,
}

/// Selects one term for per-term gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Total,
    ReconPrimary,
    ReconCsvae,
    KlPrimary,
    KlCsvae,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            total: v(self.total),
            recon_primary: v(self.recon_primary),
            recon_csvae: self.recon_csvae.map_or(0.0, v),
            kl_primary: v(self.kl_primary),
            kl_csvae: self.kl_csvae.map_or(0.0, v),
            lambda: self.lambda,
        }
    }

    pub fn term(&self, term: LossTerm) -> Option<Var> {
        match term {
            LossTerm::Total => Some(self.total),
            LossTerm::ReconPrimary => Some(self.recon_primary),
            LossTerm::ReconCsvae => self.recon_csvae,
            LossTerm::KlPrimary => Some(self.kl_primary),
            LossTerm::KlCsvae => self.kl_csvae,
        }
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(sa[0])
}

/// Squared error summed over features, averaged over the batch: the
/// negative log-likelihood of a unit-variance Gaussian decoder up to an
/// additive constant and a factor of two.
pub fn squared_error(g: &mut Graph, prediction: Var, target: Var) -> Result<Var> {
    let n = same_shape(g, "squared_error", prediction, target)?;
    let d = g.sub(prediction, target)?;
    let d2 = g.square(d)?;
    let s = g.sum(d2)?;
    g.scale(s, 1.0 / n as f64)
}

/// Absolute error summed over features, averaged over the batch.
pub fn absolute_error(g: &mut Graph, prediction: Var, target: Var) -> Result<Var> {
    let n = same_shape(g, "absolute_error", prediction, target)?;
    let d = g.sub(prediction, target)?;
    let a = g.abs(d)?;
    let s = g.sum(a)?;
    g.scale(s, 1.0 / n as f64)
}

/// `lambda * kl_primary + recon_primary`, where the KL is taken against
/// the standard normal prior. Used by the VAE and the CVAE.
pub fn cvae_loss(g: &mut Graph, output: &ModelOutput, x: Var, lambda: f64) -> Result<LossNodes> {
    let recon_primary = squared_error(g, output.reconstruction, x)?;
    let kl_primary = kl_to_standard_normal(g, &output.primary_posterior)?;
    let weighted = g.scale(kl_primary, lambda)?;
    let total = g.add(weighted, recon_primary)?;
    Ok(LossNodes {
        total,
        recon_primary,
        recon_csvae: None,
        kl_primary,
        kl_csvae: None,
        lambda,
    })
}

/// Hierarchical objective:
/// `lambda * (kl_csvae + kl_primary) + recon_csvae + recon_primary`.
///
/// The secondary posterior is frozen inside `kl_primary`, so that term
/// never sends gradient into the secondary VAE.
pub fn lcpvae_loss(
    g: &mut Graph,
    output: &ModelOutput,
    x: Var,
    c_target: Var,
    lambda: f64,
) -> Result<LossNodes> {
    let missing = || Error::Incompatible("output has no secondary VAE".into());
    let conditional = output.conditional_posterior.ok_or_else(missing)?;
    let csvae_rec = output.csvae_reconstruction.ok_or_else(missing)?;

    let kl_csvae = kl_to_standard_normal(g, &conditional)?;
    let frozen = conditional.stop_gradient(g)?;
    let kl_primary = cpvae_kl(g, &output.primary_posterior, &frozen)?;
    let recon_csvae = absolute_error(g, csvae_rec, c_target)?;
    let recon_primary = squared_error(g, output.reconstruction, x)?;

    let kl = g.add(kl_csvae, kl_primary)?;
    let weighted = g.scale(kl, lambda)?;
    let t = g.add(weighted, recon_csvae)?;
    let total = g.add(t, recon_primary)?;
    Ok(LossNodes {
        total,
        recon_primary,
        recon_csvae: Some(recon_csvae),
        kl_primary,
        kl_csvae: Some(kl_csvae),
        lambda,
    })
}

/// Ablation objective: `lambda * kl_primary + recon_primary` with the
/// primary KL taken against the fixed per-condition statistics.
pub fn ablation_loss(
    g: &mut Graph,
    output: &ModelOutput,
    x: Var,
    stats: &GaussianVars,
    lambda: f64,
) -> Result<LossNodes> {
    let recon_primary = squared_error(g, output.reconstruction, x)?;
    let kl_primary = cpvae_kl(g, &output.primary_posterior, stats)?;
    let weighted = g.scale(kl_primary, lambda)?;
    let total = g.add(weighted, recon_primary)?;
    Ok(LossNodes {
        total,
        recon_primary,
        recon_csvae: None,
        kl_primary,
        kl_csvae: None,
        lambda,
    })
}

/// Forward pass plus the loss matching the model kind.
pub fn model_loss(
    g: &mut Graph,
    model: &Model,
    p: &[Var],
    batch: &Batch,
    noise: &BatchNoise,
    lambda: f64,
    freeze: FreezeScope,
) -> Result<(ModelOutput, LossNodes)> {
    let out = model.forward(g, p, batch, noise, freeze)?;
    let x = g.constant(batch.x.clone());
    let loss = match model.kind() {
        ModelKind::Vae | ModelKind::Cvae => cvae_loss(g, &out, x, lambda)?,
        ModelKind::Lcpvae => {
            let c = g.constant(model.conditions().tensor(&batch.ids)?);
            lcpvae_loss(g, &out, x, c, lambda)?
        }
        ModelKind::LcpvaeAblation => {
            let stats = out
                .conditional_posterior
                .ok_or_else(|| Error::Incompatible("ablation output lacks statistics".into()))?;
            ablation_loss(g, &out, x, &stats, lambda)?
        }
    };
    Ok((out, loss))
}

/// Loss values without gradients.
pub fn evaluate_loss(
    model: &Model,
    batch: &Batch,
    noise: &BatchNoise,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = model.params().bind_constant(&mut g);
    let (_, loss) = model_loss(&mut g, model, &p, batch, noise, lambda, FreezeScope::KlOnly)?;
    Ok(loss.breakdown(&g))
}

/// Gradient of a single loss term with respect to every parameter, in
/// parameter order. A term the model lacks yields all-zero gradients.
pub fn term_gradients(
    model: &Model,
    batch: &Batch,
    noise: &BatchNoise,
    lambda: f64,
    freeze: FreezeScope,
    term: LossTerm,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let (_, loss) = model_loss(&mut g, model, &p, batch, noise, lambda, freeze)?;
    let zeros = || {
        model
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    };
    let Some(root) = loss.term(term) else {
        return Ok(zeros());
    };
    g.backward(root)?;
    Ok(p.iter()
        .zip(model.params().tensors())
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with bias-corrected moments. Accumulators mirror the parameter
/// shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update in place. `names` is used only for diagnostics.
    /// Nothing is modified if any gradient is malformed.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, gr)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != gr.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("`{name}`: param {:?}, grad {:?}", p.shape(), gr.shape()),
                ));
            }
            if gr.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name,
                    step: self.step,
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, gr), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in gr.data().iter().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub total: f64,
    pub recon_primary: f64,
    pub recon_csvae: f64,
    pub kl_primary: f64,
    pub kl_csvae: f64,
}

impl MetricRecord {
    pub fn new(step: u64, epoch: usize, l: &LossBreakdown) -> Self {
        MetricRecord {
            step,
            epoch,
            lambda: l.lambda,
            total: l.total,
            recon_primary: l.recon_primary,
            recon_csvae: l.recon_csvae,
            kl_primary: l.kl_primary,
            kl_csvae: l.kl_csvae,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total,
            recon_primary: self.recon_primary,
            recon_csvae: self.recon_csvae,
            kl_primary: self.kl_primary,
            kl_csvae: self.kl_csvae,
            lambda: self.lambda,
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub steps: u64,
    /// Full training-split loss before the first step, at the final weight.
    pub initial_loss: LossBreakdown,
    /// Full training-split loss after the last step, at the final weight.
    pub final_loss: LossBreakdown,
    pub validation_loss: LossBreakdown,
}

/// Builds the untrained model described by `config` for `dataset`.
pub fn build_model(config: &RunConfig, dataset: &Dataset) -> Result<Model> {
    let arch = config.architecture(dataset.data_dim());
    let conditions = dataset.condition_table(config.condition_input)?;
    let stats = match config.model {
        ModelKind::LcpvaeAblation => Some(dataset.embeddings().stats(config.latent_dim)?),
        _ => None,
    };
    Model::new(arch, conditions, stats, config.seed)
}

/// Fixed-noise loss over a whole split, used for before/after comparisons.
pub fn split_loss(model: &Model, dataset: &Dataset, split: Split, lambda: f64) -> Result<LossBreakdown> {
    let idx = dataset.split(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let batch = dataset.batch(idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed());
    rng.set_stream(EVAL_STREAM);
    let noise = BatchNoise::draw(&mut rng, idx.len(), model.latent_dim());
    evaluate_loss(model, &batch, &noise, lambda)
}

/// Seeded mini-batch training. The model always holds the last weights for
/// which the loss was finite, so it can be saved after an abort.
#[derive(Debug)]
pub struct Trainer<'a> {
    config: RunConfig,
    dataset: &'a Dataset,
    model: Model,
    optimizer: OptimizerState,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    step: u64,
    metrics: Vec<MetricRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.split(Split::Train).is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let model = build_model(config, dataset)?;
        let optimizer = OptimizerState::new(config.optimizer, model.params().tensors());
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(NOISE_STREAM);
        Ok(Trainer {
            config: config.clone(),
            dataset,
            model,
            optimizer,
            shuffle_rng,
            noise_rng,
            step: 0,
            metrics: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.split(Split::Train).len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// Shuffled mini-batches of the training split for the next epoch.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut idx = self.dataset.split(Split::Train).to_vec();
        idx.shuffle(&mut self.shuffle_rng);
        idx.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Draws the noise for the next step.
    pub fn draw_noise(&mut self, rows: usize) -> BatchNoise {
        BatchNoise::draw(&mut self.noise_rng, rows, self.model.latent_dim())
    }

    /// One optimizer step on the given rows with the given noise.
    pub fn step_on(&mut self, indices: &[usize], noise: &BatchNoise, epoch: usize) -> Result<LossBreakdown> {
        let batch = self.dataset.batch(indices)?;
        let lambda = self.config.anneal.weight(self.step);
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let (_, loss) = model_loss(
            &mut g,
            &self.model,
            &p,
            &batch,
            noise,
            lambda,
            self.config.freeze_scope,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: self.step },
            e => e,
        })?;
        let breakdown = loss.breakdown(&g);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        g.backward(loss.total).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: self.step },
            e => e,
        })?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(self.model.params().tensors())
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(g);
        let names = self.model.params().names().to_vec();
        let mut updated = self.model.params().tensors().to_vec();
        self.optimizer.step(&mut updated, &grads, &names)?;
        if updated.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.model.params_mut().replace(updated)?;
        let record = MetricRecord::new(self.step, epoch, &breakdown);
        let last = self.step + 1 == self.total_steps();
        if self.step.is_multiple_of(self.config.log_every) || last {
            self.metrics.push(record);
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        let start_epoch = (self.step / self.steps_per_epoch().max(1)) as usize;
        for epoch in start_epoch..self.config.epochs {
            for batch in self.epoch_batches() {
                let noise = self.draw_noise(batch.len());
                self.step_on(&batch, &noise, epoch)?;
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn into_parts(self) -> (RunConfig, Model, Vec<MetricRecord>, u64) {
        (self.config, self.model, self.metrics, self.step)
    }
}

/// Trains `config.model` on the training split of `dataset`.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(config, dataset)?;
    let final_lambda = config.anneal.weight(trainer.total_steps().saturating_sub(1));
    let initial_loss = split_loss(trainer.model(), dataset, Split::Train, final_lambda)?;
    trainer.run()?;
    let (config, model, metrics, steps) = trainer.into_parts();
    let final_loss = split_loss(&model, dataset, Split::Train, final_lambda)?;
    let validation_loss = split_loss(&model, dataset, Split::Validation, final_lambda)?;
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

#[cfg(test)]
mod tests;
