//! Central finite-difference gradient checking for losses built on a [`ParamStore`].

use candle_core::{Tensor, Var};
use rand::seq::index::sample;

use super::{to_vec_f64, ParamStore};
use crate::{seed, Result};

/// Largest relative error found and where.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn perturbed(var: &Var, values: &[f64], idx: usize, delta: f64) -> Result<()> {
    let mut v = values.to_vec();
    v[idx] += delta;
    let t = Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares `loss`'s backward gradient with central differences on up to
/// `per_param` randomly chosen entries of every parameter whose name passes `filter`.
pub fn check_gradients(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    per_param: usize,
    eps: f64,
    loss: &mut dyn FnMut() -> Result<Tensor>,
) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let mut rng = seed::stage_rng(0, "gradcheck");
    let mut out = GradCheck { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for (name, var) in store.named_vars() {
        if !filter(name) {
            continue;
        }
        let values = to_vec_f64(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; values.len()],
        };
        let picks = sample(&mut rng, values.len(), per_param.min(values.len()));
        for idx in picks {
            perturbed(var, &values, idx, eps)?;
            let up = super::scalar(&loss()?)?;
            perturbed(var, &values, idx, -eps)?;
            let down = super::scalar(&loss()?)?;
            perturbed(var, &values, idx, 0.0)?;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[idx], numeric, 1e-6);
            out.checked += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = format!("{name}[{idx}]: analytic {:.6e} numeric {numeric:.6e}", analytic[idx]);
            }
        }
    }
    Ok(out)
}
