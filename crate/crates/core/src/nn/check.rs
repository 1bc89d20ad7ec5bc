//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Upper bound on entries probed per parameter (evenly strided).
    pub max_entries: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { h: 1e-4, rel_tol: 1e-4, abs_floor: 1e-6, max_entries: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Compares `backward` against central differences for every trainable
/// parameter. The perturbation is rounded to `f32` and the difference
/// quotient divides by the step actually taken.
pub fn check_gradients<F>(store: &ParamStore, build: F, cfg: CheckConfig) -> Result<CheckReport, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut work = store.clone();
    let mut report = CheckReport::default();
    for i in 0..store.len() {
        let id = ParamId(i);
        let p = store.get(id);
        if p.frozen {
            continue;
        }
        let n = p.value.numel();
        let stride = n.div_ceil(cfg.max_entries.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let x = p.value.data[k];
            let xp = (f64::from(x) + cfg.h) as f32;
            let xm = (f64::from(x) - cfg.h) as f32;
            work.get_mut(id).value.data[k] = xp;
            let lp = eval(&work)?;
            work.get_mut(id).value.data[k] = xm;
            let lm = eval(&work)?;
            work.get_mut(id).value.data[k] = x;
            let numeric = (lp - lm) / (f64::from(xp) - f64::from(xm));
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            report.checked += 1;
            if diff > cfg.abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if diff > (cfg.rel_tol * scale).max(cfg.abs_floor) {
                report.failures.push(Mismatch { param: p.name.clone(), index: k, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap());
        let ok = check_gradients(
            &ps,
            |g| {
                let v = g.param(a);
                let s = g.softmax(v);
                g.weighted_sum(s, vec![1.0, 2.0, 3.0])
            },
            CheckConfig::default(),
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        // A constant input masquerading as a function of `a` has zero
        // analytic gradient but nonzero numeric gradient.
        let bad = check_gradients(
            &ps,
            |g| {
                let v = g.param(a);
                let vals: Vec<f64> = g.value(v).to_vec();
                let c = g.constant(1, 3, vals)?;
                g.weighted_sum(c, vec![1.0, 2.0, 3.0])
            },
            CheckConfig::default(),
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
