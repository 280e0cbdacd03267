//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Real;
use crate::error::Result;

/// Worst agreement found over the checked parameters.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_relative_error: Real,
    pub worst_param: String,
    pub coordinates_checked: usize,
}

/// Norms below this are treated as an exact zero gradient on both sides.
const ZERO_FLOOR: Real = 1e-9;

/// Compares `backward` against `(L(θ+ε) − L(θ−ε)) / 2ε` for every coordinate
/// of every trainable parameter (or only those listed in `only`).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    eps: Real,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store).strict(true);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore| -> Result<Real> {
        let mut g = Graph::new(store).strict(true);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect(),
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        coordinates_checked: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let zeros = vec![0.0; n];
        let a = analytic.get(id).map_or(&zeros[..], |t| t.data());
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<Real>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<Real>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < ZERO_FLOOR { diff } else { diff / denom };
        report.coordinates_checked += n;
        if rel >= report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_param = store.get(id).name.clone();
        }
    }
    Ok(report)
}
