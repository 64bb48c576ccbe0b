//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Bindings, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter path and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn evaluate<F>(f: &F, theta: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(theta);
    let out = f(&mut tape, &b)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Shape {
            op: "grad_check",
            left: v.shape(),
            right: (1, 1),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`, over every scalar parameter.
pub fn grad_check<F>(f: F, theta: &ParameterStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    grad_check_sampled(f, theta, h, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates, drawn
/// deterministically from `seed`.
pub fn grad_check_sampled<F>(
    f: F,
    theta: &ParameterStore,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::range("finite-difference step", h.to_string()));
    }
    let mut tape = Tape::new();
    let bindings = tape.bind(theta);
    let out = f(&mut tape, &bindings)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;

    let coords: Vec<(String, usize)> = theta
        .iter()
        .flat_map(|(p, t)| (0..t.data().len()).map(move |i| (p.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..coords.len()).collect()
    };

    let mut work = theta.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for ci in chosen {
        let (path, i) = &coords[ci];
        let var = bindings.var(path)?;
        let analytic = grads.get(var).map_or(0.0, |g| g.data()[*i]);
        let orig = work.get(path).expect("coordinate from store").data()[*i];
        work.get_mut(path).unwrap().data_mut()[*i] = orig + h;
        let plus = evaluate(&f, &work)?;
        work.get_mut(path).unwrap().data_mut()[*i] = orig - h;
        let minus = evaluate(&f, &work)?;
        work.get_mut(path).unwrap().data_mut()[*i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((path.clone(), *i));
        }
    }
    Ok(report)
}
