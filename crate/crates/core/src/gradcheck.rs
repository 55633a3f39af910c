//! Central finite-difference verification of [`Graph::backward`].

use indexmap::IndexMap;

use crate::error::{Result, StamError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: IndexMap<String, ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Name and result of the parameter with the largest error.
    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.params
            .iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(build: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    Ok(g.value(loss).item())
}

/// Compares the backward gradient of every parameter with the central
/// difference `(f(θ+h) - f(θ-h)) / 2h`, one coordinate at a time.
pub fn check_gradients<F>(params: &ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let loss_var = build(&mut g, &analytic)?;
    let loss = g.value(loss_var).item();
    g.backward(loss_var, &mut analytic)?;

    let again = evaluate(&build, params)?;
    if again.to_bits() != loss.to_bits() {
        return Err(StamError::NonDeterministic {
            first: loss,
            second: again,
        });
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        loss,
        params: IndexMap::new(),
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name).expect("listed name").values().to_vec();
        let grads = analytic
            .get(&name)
            .and_then(|t| t.grad())
            .expect("zeroed above")
            .to_vec();
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: grads.first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        let mut values = base.clone();
        for i in 0..base.len() {
            values[i] = base[i] + step;
            probe.set_values(&name, &values)?;
            let plus = evaluate(&build, &probe)?;
            values[i] = base[i] - step;
            probe.set_values(&name, &values)?;
            let minus = evaluate(&build, &probe)?;
            values[i] = base[i];
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grads[i], numeric);
            if err > check.max_rel_error || i == 0 {
                check = ParamCheck {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: grads[i],
                    numeric,
                };
            }
        }
        probe.set_values(&name, &base)?;
        report.params.insert(name, check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new(1);
        p.register_uniform("w", vec![4], 1).unwrap();
        let report = check_gradients(&p, DEFAULT_STEP, |g, s| {
            let w = g.param(s, "w")?;
            let sq = g.mul(w, w)?;
            let total = g.sum(sq)?;
            g.scale(total, 0.5)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-9, "{report:?}");
    }

    #[test]
    fn nondeterministic_builder_is_reported() {
        let mut p = ParamStore::new(1);
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = check_gradients(&p, DEFAULT_STEP, |g, s| {
            calls.set(calls.get() + 1.0);
            let w = g.param(s, "w")?;
            g.add_scalar(w, calls.get())
        })
        .unwrap_err();
        assert!(matches!(err, StamError::NonDeterministic { .. }));
    }

    #[test]
    fn tanh_matches_and_error_formula() {
        let mut p = ParamStore::new(2);
        p.insert("x", Tensor::vector(vec![0.3, -0.7]).unwrap())
            .unwrap();
        let report = check_gradients(&p, DEFAULT_STEP, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.tanh(x)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(relative_error(1.0, -1.0), 1.0);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
