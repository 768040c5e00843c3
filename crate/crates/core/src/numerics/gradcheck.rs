//! Central finite-difference checks of tape gradients in 64-bit.

use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default perturbation.
pub const FD_STEP: f64 = 1e-4;

/// Largest tolerated relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error of tape gradients against central differences.
///
/// The error for one input tensor is `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-8)`;
/// the returned value is the worst over all inputs. `f` must be a pure
/// function of its inputs (any sampling inside it must be seeded).
pub fn relative_error<Fun>(inputs: &[Tensor<f64>], step: f64, f: Fun) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        if numeric.iter().any(|x| !x.is_finite()) || !analytic.all_finite() {
            return Err(Error::Numeric("non-finite gradient in check".into()));
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(1e-8f64, |m, x| m.max(x.abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
