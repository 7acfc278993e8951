//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Tensors with more elements than this are checked on a random subsample.
    pub full_check_limit: usize,
    /// Subsample size for large tensors.
    pub sample: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            full_check_limit: 128,
            sample: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements over tolerance whose absolute discrepancy exceeds the
    /// difference's rounding resolution.
    pub resolved_failures: usize,
    /// Elements over tolerance whose absolute discrepancy is within it.
    pub unresolved_failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub eps: f64,
    /// Sum of the absolute loss terms at the unperturbed parameters.
    pub loss_scale: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    /// Smallest gradient discrepancy a central difference can see: one unit
    /// of rounding in the loss values divided by the step `2ε`.
    pub fn resolution(&self) -> f64 {
        f64::EPSILON * self.loss_scale / (2.0 * self.eps)
    }

    /// True when every element over tolerance sits within the rounding
    /// resolution, i.e. the failures say nothing about the tape gradients.
    pub fn only_unresolved_failures(&self) -> bool {
        self.params.iter().all(|p| p.resolved_failures == 0)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tol).collect()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A loss for checking: `total` is differentiated on the tape, `terms` are
/// the summands whose differences make up the numeric estimate.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<Var>,
}

impl Objective {
    pub fn single(loss: Var) -> Self {
        Self {
            total: loss,
            terms: vec![loss],
        }
    }
}

fn eval_terms<F>(store: &ParamStore, build: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Objective>,
{
    let mut g = Graph::new();
    let obj = build(&mut g, store)?;
    Ok(obj.terms.iter().map(|&t| g.scalar(t)).collect())
}

/// Compares the tape gradient of `build_loss` with central differences for
/// every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, build_loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync + Send,
{
    grad_check_terms(store, |g, s| build_loss(g, s).map(Objective::single), cfg)
}

/// Like [`grad_check`] for a loss that is a sum of terms. Each term is
/// differenced on its own before the differences are added, which is the
/// same estimate in exact arithmetic but keeps a large term that does not
/// depend on a parameter from swamping that parameter's difference with
/// rounding error.
pub fn grad_check_terms<F>(store: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Objective> + Sync + Send,
{
    let mut g = Graph::new();
    let obj = build(&mut g, store)?;
    let first = g.scalar(obj.total);
    let term_sum: f64 = obj.terms.iter().map(|&t| g.scalar(t)).sum();
    let loss_scale: f64 = obj.terms.iter().map(|&t| g.scalar(t).abs()).sum();
    if (term_sum - first).abs() > 1e-12 * first.abs().max(1.0) {
        return Err(Error::Range(format!(
            "loss terms sum to {term_sum} but the total is {first}"
        )));
    }
    let mut g2 = Graph::new();
    let obj2 = build(&mut g2, store)?;
    let second = g2.scalar(obj2.total);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = g.gradients(obj.total, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        let n = store.value(id).len();
        if n <= cfg.full_check_limit {
            probes.extend((0..n).map(|i| (id, i)));
        } else {
            let mut idx = sample(&mut rng, n, cfg.sample.min(n)).into_vec();
            idx.sort_unstable();
            probes.extend(idx.into_iter().map(|i| (id, i)));
        }
    }

    let numeric: Vec<Result<f64>> = par::map(&probes, |&(id, i)| {
        let mut s = store.clone();
        let orig = s.value(id).data()[i];
        s.value_mut(id).data_mut()[i] = orig + cfg.eps;
        let up = eval_terms(&s, &build)?;
        s.value_mut(id).data_mut()[i] = orig - cfg.eps;
        let down = eval_terms(&s, &build)?;
        let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        Ok(diff / (2.0 * cfg.eps))
    });

    let mut params: Vec<ParamCheck> = store
        .ids()
        .map(|id| ParamCheck {
            name: store.name(id).to_string(),
            elements: store.value(id).len(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            resolved_failures: 0,
            unresolved_failures: 0,
        })
        .collect();
    let resolution = f64::EPSILON * loss_scale / (2.0 * cfg.eps);
    for (&(id, i), num) in probes.iter().zip(numeric) {
        let num = num?;
        let a = analytic.get(id).data()[i];
        let err = relative_error(a, num);
        let entry = &mut params[id.0];
        entry.checked += 1;
        if err >= cfg.tol {
            if (a - num).abs() > resolution {
                entry.resolved_failures += 1;
            } else {
                entry.unresolved_failures += 1;
            }
        }
        if err > entry.max_rel_err || entry.checked == 1 {
            entry.max_rel_err = err.max(entry.max_rel_err);
            entry.worst_index = i;
            entry.analytic = a;
            entry.numeric = num;
        }
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        eps: cfg.eps,
        loss_scale,
        params,
    })
}
