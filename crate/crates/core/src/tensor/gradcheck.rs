//! Central finite differences for checking backward passes.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to check.

use super::Matrix;
use crate::error::Result;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `params`, one matrix per parameter.
pub fn central_difference<F>(params: &[Matrix], step: f64, mut f: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[k] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

pub fn compare(names: &[&str], analytic: &[Matrix], numeric: &[Matrix]) -> Vec<GroupReport> {
    names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let mut rel = 0.0f64;
            let mut abs = 0.0f64;
            for (&x, &y) in a.data().iter().zip(n.data()) {
                rel = rel.max(relative_error(x, y));
                abs = abs.max((x - y).abs());
            }
            GroupReport {
                name: name.to_string(),
                entries: a.len(),
                max_relative_error: rel,
                max_absolute_error: abs,
            }
        })
        .collect()
}

pub fn worst(reports: &[GroupReport]) -> f64 {
    reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max)
}
