//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter tensor (all when the tensor is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Coordinates where both gradients are below this magnitude count as
    /// agreeing (structurally zero gradients, e.g. biases before batch norm).
    pub zero_tol: f64,
    /// Times a disagreeing coordinate is re-measured with the step divided
    /// by ten, for finite differences that straddle a ReLU or max kink. The
    /// smallest error over all attempts is reported.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, samples_per_param: 16, seed: 0, zero_tol: 0.0, kink_retries: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    /// Re-measurements made with a reduced step.
    pub retried: usize,
}

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

const RETRY_ABOVE: f64 = 1e-7;

fn eval_loss<F>(params: &ParamStore<f64>, forward: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    Ok(g.data(loss)[0])
}

/// Compares analytic gradients of a scalar loss with central differences
/// over randomly sampled coordinates of every trainable parameter.
///
/// `forward` must be deterministic in `params`.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    mut forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    g.backward(loss)?;
    let analytic = g.param_grads();
    compare_gradients(params, &analytic, forward, opts)
}

/// The numeric half of [`grad_check`], taking analytic gradients from the
/// caller.
pub fn compare_gradients<F>(
    params: &mut ParamStore<f64>,
    analytic: &[(String, Vec<f64>)],
    mut forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        retried: 0,
    };
    for (name, grad) in analytic {
        let len = grad.len();
        let picks = sample(&mut rng, len, opts.samples_per_param.min(len));
        for idx in picks.iter() {
            let orig = params.tensor(name)?.data()[idx];
            let mut h = opts.h;
            let mut err = f64::INFINITY;
            let mut attempt = 0;
            loop {
                params.tensor_mut(name)?.data_mut()[idx] = orig + h;
                let plus = eval_loss(params, &mut forward);
                params.tensor_mut(name)?.data_mut()[idx] = orig - h;
                let minus = eval_loss(params, &mut forward);
                params.tensor_mut(name)?.data_mut()[idx] = orig;
                let numeric = (plus? - minus?) / (2.0 * h);
                let e = if grad[idx].abs() < opts.zero_tol && numeric.abs() < opts.zero_tol {
                    0.0
                } else {
                    relative_error(grad[idx], numeric)
                };
                err = err.min(e);
                if err <= RETRY_ABOVE || attempt == opts.kink_retries {
                    break;
                }
                attempt += 1;
                report.retried += 1;
                h /= 10.0;
            }
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
