//! Independent numerical oracles used by the test suites and `glmask check`.

use crate::autodiff::ParameterSet;
use crate::error::Result;

/// Central finite differences of `f` at `params` for the flat coordinates in
/// `coords` (all coordinates when `None`).
pub fn finite_difference<F>(
    params: &ParameterSet,
    h: f64,
    coords: Option<&[usize]>,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    let layout = params.layout();
    let base = params.flatten();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = base.clone();
    for &i in coords {
        probe[i] = base[i] + h;
        let up = f(&ParameterSet::from_flat(&layout, &probe)?)?;
        probe[i] = base[i] - h;
        let down = f(&ParameterSet::from_flat(&layout, &probe)?)?;
        probe[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
