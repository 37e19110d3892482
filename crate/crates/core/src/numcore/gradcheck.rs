//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::params::Bound;
use super::rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Coordinates are checked exhaustively up to this many scalars.
pub const FULL_CHECK_LIMIT: usize = 500;
/// Sample size above [`FULL_CHECK_LIMIT`].
pub const SAMPLED_COORDS: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = Bound::from_vars(params.iter().map(|p| tape.leaf(p.clone())).collect());
    let out = f(&mut tape, &bound);
    tape.value(out).item()
}

/// Compares backward against central differences of `f` around `params`.
///
/// `f` must build a scalar from the bound parameters and be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = Bound::from_vars(params.iter().map(|p| tape.leaf(p.clone())).collect());
    let out = f(&mut tape, &bound);
    let grads = bound.grads(&tape.backward(out)?);
    drop(tape);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.numel();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = if total <= FULL_CHECK_LIMIT {
        (0..total).collect()
    } else {
        let mut r = rng::stream(seed, "gradcheck", 0);
        let mut c = sample(&mut r, total, SAMPLED_COORDS).into_vec();
        c.sort_unstable();
        c
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: None,
    };
    for flat in coords {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[pi];
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + eps;
        let up = eval(&f, &work);
        work[pi].data_mut()[ci] = orig - eps;
        let down = eval(&f, &work);
        work[pi].data_mut()[ci] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads[pi].data()[ci], numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, ci));
        }
    }
    Ok(report)
}
