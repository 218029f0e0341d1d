use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Above this many parameter elements a seeded subsample is checked.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            max_elements: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.checked as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences over every element of `store` (or a seeded subsample).
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.backward_into(root, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        Ok(tape.value(root).data()[0])
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut elements: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    if elements.len() > opts.max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, elements.len(), opts.max_elements).into_vec();
        picked.sort_unstable();
        elements = picked.into_iter().map(|i| elements[i]).collect();
    }

    let mut report = GradCheckReport {
        checked: 0,
        within_tol: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, i) in elements {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + opts.step;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig - opts.step;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric, opts.abs_floor);
        report.checked += 1;
        if err <= opts.rel_tol {
            report.within_tol += 1;
        }
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    Ok(report)
}
