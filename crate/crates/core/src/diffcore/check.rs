use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Compare analytic gradients of `f` against central finite differences.
///
/// Returns the maximum over all coordinates of the selected parameters of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, mut f: F) -> Result<f64>
where
    F: for<'g> FnMut(&mut Graph<'g>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("function value {value}")));
        }
        let grads = g.backward(loss)?;
        params
            .iter()
            .map(|&id| {
                let n = store.get(id).values.len();
                grads.param(id).map_or_else(|| vec![0.0; n], |pg| pg.to_dense(n))
            })
            .collect()
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.scalar_value(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("function value {v}")))
        }
    };

    let mut worst: f64 = 0.0;
    for (&id, grad) in params.iter().zip(&analytic) {
        for i in 0..grad.len() {
            let orig = store.get(id).values[i];
            store.get_mut(id).values[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).values[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).values[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
