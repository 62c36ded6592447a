use rand::Rng;

use super::param::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// One flat coordinate inside a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
}

/// Draws `count` coordinates, first cycling through every parameter so each
/// tensor is covered at least once when `count >= params.len()`.
pub fn sample_coords(params: &ParamSet, count: usize, rng: &mut impl Rng) -> Vec<Coord> {
    let ids: Vec<ParamId> = params.ids().collect();
    (0..count)
        .map(|i| {
            let param = if i < ids.len() {
                ids[i]
            } else {
                ids[rng.random_range(0..ids.len())]
            };
            let index = rng.random_range(0..params.get(param).value().len());
            Coord { param, index }
        })
        .collect()
}

/// Compares tape gradients of `build` against central differences with
/// step `h` at the given coordinates.
pub fn grad_check<F>(params: &mut ParamSet, coords: &[Coord], h: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::recording(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::frozen(params);
        let loss = build(&mut tape)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &coord in coords {
        let original = params.get(coord.param).value().data()[coord.index];
        params.get_mut(coord.param).value_mut().data_mut()[coord.index] = original + h;
        let plus = eval(params);
        params.get_mut(coord.param).value_mut().data_mut()[coord.index] = original - h;
        let minus = eval(params);
        params.get_mut(coord.param).value_mut().data_mut()[coord.index] = original;
        let numeric = (plus? - minus?) / (2.0 * h);
        let analytic = grads.at(coord.param, coord.index);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(coord);
        }
        report.checked += 1;
    }
    Ok(report)
}
