//! Finite-difference oracle for reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that exactly-zero gradients compare on an absolute scale.
const FLOOR: f64 = 1e-4;

fn evaluate<F>(f: &F, point: &[Tensor<f64>], name: &str) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "{name}: grad_check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    for i in 0..g.len() {
        if !g.value(Var::from_index(i)).is_finite() {
            return Err(Error::NonFinite(format!("{name} (graph node {i})")));
        }
    }
    Ok((g, vars, out))
}

/// Maximum relative error between the reverse-mode gradient of `f` at
/// `point` and central finite differences, over every input entry.
pub fn grad_check<F>(name: &str, f: F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let (g, vars, out) = evaluate(&f, point, name)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (k, p) in point.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            probe[k].data_mut()[j] = orig + GRAD_CHECK_STEP;
            let (gp, _, op) = evaluate(&f, &probe, name)?;
            let plus = gp.value(op).item();
            probe[k].data_mut()[j] = orig - GRAD_CHECK_STEP;
            let (gm, _, om) = evaluate(&f, &probe, name)?;
            let minus = gm.value(om).item();
            probe[k].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[k].data()[j];
            let denom = a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
