//! Finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Stream;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor * max(1, |loss|))`
    /// as the denominator. Central differences carry round-off of roughly
    /// `|loss| * 2.2e-16 / eps`, so gradients far below the loss scale (often
    /// exactly zero, e.g. biases cancelled by a later centering) would
    /// otherwise be compared against pure noise.
    pub floor: f64,
    /// Checks at most this many entries per parameter tensor (sampled
    /// deterministically); `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, tol: 1e-4, floor: 1e-6, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of every trainable parameter with
/// central differences. `build` must construct the same scalar loss
/// deterministically from the given parameters.
pub fn grad_check<F>(store: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.params(&g, store);
    let floor = cfg.floor * g.value(loss).item().abs().max(1.0);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut pick = Stream::new(cfg.seed, "gradcheck");
    let mut work = store.clone();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut n_checked = 0;
    for p in 0..store.len() {
        if !store.is_trainable(p) {
            continue;
        }
        let len = store.value_at(p).len();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < len => {
                let mut all: Vec<usize> = (0..len).collect();
                pick.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        for e in entries {
            let orig = store.value_at(p).data()[e];
            work.value_at_mut(p).data_mut()[e] = orig + cfg.eps;
            let plus = eval(&work)?;
            work.value_at_mut(p).data_mut()[e] = orig - cfg.eps;
            let minus = eval(&work)?;
            work.value_at_mut(p).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(p).data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            n_checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                if rel >= max_rel {
                    worst = Some((store.name_at(p).to_string(), e));
                }
            }
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst, n_checked, tol: cfg.tol, passed: max_rel <= cfg.tol })
}
