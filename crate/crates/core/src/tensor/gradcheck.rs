//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever evaluates forward values; it shares no code with the
//! backward pass it certifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::Result;

/// Denominator floor of [`relative_error`], so that gradients that are
/// exactly or nearly zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Reduces a non-scalar output to a scalar with a fixed random projection so
/// every output element receives a distinct cotangent.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_c0de);
    let w: Vec<f64> = (0..g.value(out).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let w = g.constant(Tensor::from_vec(&shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Compares backward gradients of `f` with respect to every parameter in
/// `params` against central differences.
pub fn check_params<F>(name: &str, params: &ParamSet<f64>, step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    // bind everything so unused parameters report zero gradients
    for (id, _, _) in params.iter() {
        g.param(params, id);
    }
    let out = f(&mut g, params)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;
    let analytic = g.param_grads(params);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, p)?;
        let loss = scalarize(&mut g, out)?;
        Ok(g.value(loss).item())
    };

    let mut probe = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for j in 0..params.get(id).numel() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic.of(id)[j], numeric);
            max_rel_err = max_rel_err.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err,
        checked,
    })
}

/// Same as [`check_params`] with plain input tensors, bound in order.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut params = ParamSet::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.insert(format!("x{i}"), t.clone()))
        .collect();
    check_params(name, &params, step, |g, p| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
        f(g, &vars)
    })
}
