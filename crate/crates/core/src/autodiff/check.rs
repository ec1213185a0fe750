use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// `(parameter index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from parameter handles. It is evaluated once with
/// parameters as gradient-tracking leaves, then once per perturbed element.
/// During perturbed evaluations every `stop_gradient` node replays the value
/// it had at the unperturbed point, matching the analytic treatment of frozen
/// quantities as constants.
///
/// The error for one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` and the maximum
/// over all elements is returned.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let base = g.value(root).clone();
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("parameter leaves track gradients"))
        .collect();
    let frozen = g.stopped_values();

    let mut again = Graph::new();
    let vars2: Vec<Var> = params.iter().map(|p| again.param(p.clone())).collect();
    let root2 = f(&mut again, &vars2)?;
    if again.value(root2).data() != base.data() {
        return Err(Error::NonDeterministic);
    }

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_frozen(frozen.clone());
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let r = f(&mut g, &vars)?;
        g.value(r)
            .item()
            .ok_or_else(|| Error::NonScalarRoot(g.value(r).shape().to_vec()))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_err = 0.0f64;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut num = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * eps);
            num.data_mut()[j] = n;
            let a = analytic[pi].data()[j];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
            if err > max_err {
                max_err = err;
                worst = Some((pi, j));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_relative_error: max_err,
        worst,
        analytic,
        numeric,
    })
}
