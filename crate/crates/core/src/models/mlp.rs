use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::distributions::{GaussianVars, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Indices of parameters whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Adds every tensor to `g` as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Replaces all tensors, keeping names. Shapes must match.
    pub fn replace(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("ParamSet::replace", "layout differs"));
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Feedforward stack: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    name: String,
    widths: Vec<usize>,
    layers: Vec<(usize, usize)>,
}

impl MlpBlock {
    /// Registers weights `[fan_in, fan_out]` and biases `[1, fan_out]` in
    /// `params`. Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        widths: &[usize],
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "block `{name}` needs at least two non-zero widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                let weight = Tensor::new(vec![fan_in, fan_out], data)?;
                let wi = params.push(format!("{name}.{i}.weight"), weight);
                let bi = params.push(format!("{name}.{i}.bias"), Tensor::zeros(&[1, fan_out]));
                Ok((wi, bi))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpBlock {
            name: name.to_string(),
            widths: widths.to_vec(),
            layers,
        })
    }

    /// Like [`MlpBlock::new`] but the output is split into `(mean, log_std)`,
    /// so the output width must be even.
    pub fn encoder<R: Rng + ?Sized>(
        name: &str,
        widths: &[usize],
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.last().is_some_and(|w| w % 2 != 0) {
            return Err(Error::Config(format!(
                "encoder `{name}` output width must be even, got {widths:?}"
            )));
        }
        MlpBlock::new(name, widths, params, rng)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let in_shape = g.value(input).shape();
        if in_shape.len() != 2 || in_shape[1] != self.input_width() {
            return Err(Error::shape(
                "mlp",
                format!(
                    "block `{}` expects width {}, got {in_shape:?}",
                    self.name,
                    self.input_width()
                ),
            ));
        }
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.matmul(h, params[w])?;
            h = g.add_row(h, params[b])?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Runs the block and splits its output into a clamped diagonal Gaussian.
    pub fn encode(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<GaussianVars> {
        let out = self.forward(g, params, input)?;
        let d = self.output_width() / 2;
        let mean = g.narrow(out, 1, 0, d)?;
        let raw = g.narrow(out, 1, d, d)?;
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(GaussianVars { mean, log_std })
    }
}
