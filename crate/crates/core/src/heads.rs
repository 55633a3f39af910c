use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::{Result, StamError};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::params::ParamStore;

/// Linear classifier `W g + b` tapped onto one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    prefix: String,
    feature_dim: usize,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

impl ClassifierHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(StamError::config("a classifier needs at least two classes"));
        }
        let head = ClassifierHead {
            prefix: prefix.to_string(),
            feature_dim,
            num_classes,
        };
        store.register_uniform(&head.name("w"), vec![num_classes, feature_dim], feature_dim)?;
        store.register_uniform(&head.name("b"), vec![num_classes], feature_dim)?;
        Ok(head)
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn bind(&self, graph: &mut Graph, store: &ParamStore) -> Result<HeadVars> {
        Ok(HeadVars {
            w: graph.param(store, &self.name("w"))?,
            b: graph.param(store, &self.name("b"))?,
        })
    }
}

pub fn classify(graph: &mut Graph, global: Var, head: &HeadVars) -> Result<Var> {
    let wg = graph.matmul(head.w, global)?;
    graph.add(wg, head.b)
}

pub fn cross_entropy(graph: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    graph.cross_entropy(logits, label)
}

/// Plain-number cross-entropy, for metrics.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(StamError::domain(
            "cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Per-stage loss weights `λ_0..λ_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(StamError::config("loss weights are empty"));
        }
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(StamError::config(format!(
                "loss weights must be finite and nonnegative, got {lambdas:?}"
            )));
        }
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(StamError::config(
                "at least one loss weight must be positive",
            ));
        }
        Ok(LossWeights(lambdas))
    }

    pub fn ones(stages: usize) -> Result<Self> {
        LossWeights::new(vec![1.0; stages])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        LossWeights::new(self.0.iter().map(|l| l * alpha).collect())
    }
}

impl TryFrom<Vec<f64>> for LossWeights {
    type Error = StamError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        LossWeights::new(v)
    }
}

impl From<LossWeights> for Vec<f64> {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

/// `Σ_i λ_i · CE(classify(g_i, head_i), label)` over every stage.
pub fn combined_loss(
    graph: &mut Graph,
    trace: &AttentionTrace,
    heads: &[HeadVars],
    label: usize,
    weights: &LossWeights,
) -> Result<Var> {
    let stages = trace.stages();
    if heads.len() != stages || weights.len() != stages {
        return Err(StamError::config(format!(
            "{stages} stages but {} heads and {} loss weights",
            heads.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&g, head), &lambda) in trace.globals.iter().zip(heads).zip(weights.as_slice()) {
        let logits = classify(graph, g, head)?;
        let ce = cross_entropy(graph, logits, label)?;
        let term = graph.scale(ce, lambda)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Prediction from the final stage's head.
pub fn predict_trace(
    graph: &mut Graph,
    trace: &AttentionTrace,
    heads: &[HeadVars],
) -> Result<usize> {
    let head = heads
        .last()
        .ok_or_else(|| StamError::config("no classifier heads"))?;
    let logits = classify(graph, trace.final_global(), head)?;
    Ok(predict(graph.values(logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy_value(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_value(&[30.0, -30.0], 0).unwrap() < 1e-12);
        let e = |x: f64| x.exp();
        let oracle = -(e(3.0) / (e(1.0) + e(2.0) + e(3.0))).ln();
        let got = cross_entropy_value(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 0.407606).abs() < 1e-6);
        assert!(cross_entropy_value(&[1.0], 1).is_err());
    }

    #[test]
    fn graph_cross_entropy_agrees() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let ce = cross_entropy(&mut g, z, 2).unwrap();
        assert_eq!(
            g.value(ce).item(),
            cross_entropy_value(&[1.0, 2.0, 3.0], 2).unwrap()
        );
    }

    #[test]
    fn classify_zero_and_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap());
        let zero = HeadVars {
            w: g.constant(Tensor::zeros(vec![3, 3]).unwrap()),
            b: g.constant(Tensor::zeros(vec![3]).unwrap()),
        };
        let out = classify(&mut g, x, &zero).unwrap();
        assert_eq!(g.values(out), &[0.0, 0.0, 0.0]);
        let eye = HeadVars {
            w: g.constant(
                Tensor::from_rows(&[
                    vec![1.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 1.0],
                ])
                .unwrap(),
            ),
            b: zero.b,
        };
        let out = classify(&mut g, x, &eye).unwrap();
        assert_eq!(g.values(out), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::new(vec![]).is_err());
        assert!(LossWeights::new(vec![0.0, 0.0]).is_err());
        assert!(LossWeights::new(vec![1.0, -0.1]).is_err());
        assert!(LossWeights::new(vec![0.0, 1.0]).is_ok());
        let parsed: std::result::Result<LossWeights, _> = serde_json::from_str("[0.0, 0.0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn predict_ties_and_scaling() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.5, 0.5]), 0);
        let z = [0.3, -1.0, 2.5, 2.4];
        for a in [1e-3, 0.7, 1.0, 42.0] {
            let scaled: Vec<f64> = z.iter().map(|v| v * a).collect();
            assert_eq!(predict(&scaled), 2);
        }
    }
}
