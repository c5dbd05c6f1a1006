use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{backward, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Upper bound on the number of coordinates compared.
    pub max_coords: usize,
    /// Seed of the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ±eps probe changed a discrete branch
    /// (arg-max winner, neighbor graph, sort order).
    pub skipped: usize,
    pub worst: Option<CoordError>,
}

/// Compares reverse-mode gradients of `f` against central differences on a
/// random subsample of parameter coordinates.
///
/// `f` must rebuild the whole computation from the given parameters each
/// call. A coordinate whose perturbed evaluations record a different branch
/// signature than the unperturbed one sits on (or within eps of) a
/// non-differentiable point and is skipped.
pub fn finite_diff_check<F>(mut f: F, params: &ParamStore, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let mut work = params.clone();
    let (tape, loss) = f(&work)?;
    let base_sig = tape.branch_signature();
    let mut analytic = params.clone();
    backward(&tape, loss, &mut analytic)?;
    drop(tape);

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = |work: &mut ParamStore, name: &str, i: usize, x: f64| -> Result<(f64, u64)> {
        work.value_mut(name).expect("name from store").data_mut()[i] = x;
        let (t, l) = f(work)?;
        Ok((t.value(l).item()?, t.branch_signature()))
    };
    for (name, i) in coords {
        if report.checked >= cfg.max_coords {
            break;
        }
        let x0 = params.value(&name).expect("name from store").data()[i];
        let (fp, sp) = probe(&mut work, &name, i, x0 + cfg.eps)?;
        let (fm, sm) = probe(&mut work, &name, i, x0 - cfg.eps)?;
        work.value_mut(&name).expect("name from store").data_mut()[i] = x0;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let a = analytic.grad(&name).expect("name from store").data()[i];
        let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordError {
                name: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
