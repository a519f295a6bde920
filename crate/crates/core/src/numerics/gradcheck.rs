//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes, so it shares no code
//! with the backward rules it checks.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, NORM_FLOOR))`
    pub per_param: Vec<(String, f64)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> (String, f64) {
        self.per_param
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, p| if p.1 > acc.1 { p } else { acc })
    }
}

/// Gradients whose norm is below this are compared absolutely: for an O(1)
/// loss, central differences carry roughly 1e-11 of rounding noise per
/// element, which would otherwise read as a 100% relative error on a
/// gradient that is exactly zero (a key bias under softmax, for instance).
pub const NORM_FLOOR: f64 = 1e-6;

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let l = f(&mut g)?;
    Ok(g.value(l).data()[0])
}

/// Compares analytic gradients of `f` w.r.t. every unfrozen parameter with
/// central differences of step `h`. At most `max_elements` entries per tensor
/// are probed (evenly strided).
pub fn check<F>(store: &mut ParamStore<f64>, f: F, h: f64, max_elements: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        let grads = g.backward(l)?;
        store.ids().map(|id| grads.param(id).map(<[f64]>::to_vec)).collect()
    };

    let mut per_param = Vec::new();
    let mut elements_checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).frozen {
            continue;
        }
        let n = store.value(id).len();
        let stride = n.div_ceil(max_elements.max(1)).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, &f)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, &f)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            elements_checked += 1;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(NORM_FLOOR);
        per_param.push((store.get(id).name.clone(), rel));
    }
    Ok(GradCheckReport {
        per_param,
        elements_checked,
    })
}
