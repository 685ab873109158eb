use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Mode, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients at
    /// round-off scale are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Graph mode for every evaluation. `Train` must come with dropout
    /// disabled, otherwise `f` is not deterministic.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            mode: Mode::Eval,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F, mode: Mode) -> Result<(f64, u64)>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let loss = f(store, &mut g)?;
    Ok((g.value(loss).item(), g.relu_pattern()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(θ+eps) − f(θ−eps)) / 2eps`, coordinate by
/// coordinate. `f` must be deterministic.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(opts.mode);
    let loss = f(store, &mut g)?;
    g.backward(loss, store)?;
    drop(g);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut rep = ParamError {
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let (plus, pat_plus) = eval(store, &mut f, opts.mode)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let (minus, pat_minus) = eval(store, &mut f, opts.mode)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if pat_plus != pat_minus {
                rep.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[id.0][i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            rep.checked += 1;
            if rel > rep.max_rel_err || rel.is_nan() {
                rep.max_rel_err = rel;
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        per_param.push(rep);
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let passed = per_param.iter().all(|p| p.max_rel_err < opts.tol);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol: opts.tol,
        passed,
    })
}
