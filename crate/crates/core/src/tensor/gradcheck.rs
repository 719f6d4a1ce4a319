//! Central-difference check of every trainable parameter gradient.

use std::collections::HashMap;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst element found by [`check_param_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares the tape gradient of every trainable parameter element with
/// `(f(w + h) - f(w - h)) / 2h`. The relative error uses
/// `max(|analytic|, |numeric|, floor)` as denominator so that gradients
/// that are zero up to rounding do not dominate.
pub fn check_param_grads(
    store: &mut ParamStore<f64>,
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
) -> Result<GradCheck> {
    let (mut tape, l) = loss(store)?;
    tape.backward(l)?;
    let analytic: HashMap<_, Vec<f64>> = tape.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
    drop(tape);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let (t, l) = loss(s)?;
        Ok(t.item(l))
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: String::new() };
    for id in ids {
        let n = store.get(id).len();
        let name = store.name(id).to_string();
        let grad = analytic
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("parameter {name} received no gradient")))?
            .clone();
        for j in 0..n {
            let w0 = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = w0 + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = w0 - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = w0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_err || !rel.is_finite() {
                out.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                out.worst = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(out)
}
