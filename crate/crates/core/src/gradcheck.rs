//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorError, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS: usize = 64;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter index, flat coordinate) achieving the max error.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape and the parameters registered on it as
/// trainable leaves, and returns the scalar loss node. The relative error of
/// a coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn check_gradients<F, E>(loss_fn: F, params: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.param(p.clone())).collect();
        let l = loss_fn(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords = sample(&mut rng, n, n.min(MAX_COORDS)).into_vec();
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, c));
                }
            }
        }
    }
    Ok(report)
}
