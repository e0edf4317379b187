//! Central finite-difference gradient checks in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so that two near-zero
/// gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives the inputs as trainable leaves and must return a scalar.
/// Only inputs whose index is in `wrt` are perturbed; `fraction` in (0, 1]
/// samples that share of their elements (at least one per input).
pub fn check<F>(inputs: &[Tensor<f64>], wrt: &[usize], step: f64, fraction: f64, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap_or_default().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut values = inputs.to_vec();
    for &i in wrt {
        let numel = values[i].numel();
        let mut picked: Vec<usize> = (0..numel).filter(|_| fraction >= 1.0 || rng.gen::<f64>() < fraction).collect();
        if picked.is_empty() && numel > 0 {
            picked.push(rng.gen_range(0..numel));
        }
        for j in picked {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// `sum(v ⊙ r)` for a fixed pseudo-random `r`, turning any tensor into a
/// scalar with non-uniform upstream gradient.
pub fn random_projection(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)));
    let p = g.mul(v, r)?;
    g.sum(p)
}
