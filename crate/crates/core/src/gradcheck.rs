//! Central finite-difference checks of tape gradients.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
//! with `floor = 1e-6 · max(1, |loss|)`. Round-off in the differenced loss
//! grows with its magnitude, so entries far below that level are judged on
//! absolute error instead.

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Balances O(h²) truncation against cancellation in the differenced loss.
pub const DEFAULT_STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR * loss.abs().max(1.0))
}

/// Compare tape gradients of `loss` with central differences over every
/// entry of every parameter.
pub fn check_params<F>(params: &mut ParamStore, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (analytic, value): (Vec<Tensor>, f64) = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let l = loss(&tape, &bound)?;
        let mut g = tape.backward(&l)?;
        (bound.iter().map(|v| g.take(v).unwrap()).collect(), l.value().item())
    };
    let eval = |ps: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let bound = ps.bind(&tape);
        Ok(loss(&tape, &bound)?.value().item())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let ids: Vec<_> = (0..params.len()).map(crate::tensor::ParamId).collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grad.data()[k], numeric, value);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.0.is_empty() {
                report.max_rel_err = e.max(report.max_rel_err);
                report.worst = (params.name(id).to_string(), k);
            }
        }
    }
    Ok(report)
}

/// Check gradients of a scalar function of plain input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("x{i}"), t.clone())?;
    }
    check_params(&mut store, h, f)
}
