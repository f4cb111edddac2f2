use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_param: Some(12),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `loss` against central finite differences.
///
/// The error of a coordinate is `|analytic - numeric| / max(1, |analytic|)`;
/// the report carries the maximum over the sampled coordinates. `loss` must
/// be deterministic in the parameters.
pub fn finite_difference_check<F>(
    store: &ParameterStore,
    opts: &GradCheckOptions,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for k in coords {
            if store.has_padding_row(id) && k < store.value(id).last_dim() {
                continue;
            }
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + opts.h;
            let plus = eval(&work, &mut loss)?;
            work.value_mut(id).data_mut()[k] = orig - opts.h;
            let minus = eval(&work, &mut loss)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParameterStore, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let l = loss(&mut tape)?;
    Ok(tape.value(l).item())
}
