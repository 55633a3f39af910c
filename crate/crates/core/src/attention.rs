//! Global-query temporal attention and its stacked form.
//!
//! One layer projects the incoming global feature to a single query, scores
//! every clip key against it, and returns the softmax-weighted sum of clip
//! values as the next global feature:
//!
//! ```text
//! q   = W_q · norm(g)          k_i = W_k f_i          v_i = W_v f_i
//! c_i = (q · k_i) / √d         a   = softmax(c)       g'  = Σ_i a_i v_i
//! ```
//!
//! Stacking applies M independently parameterized layers, each fed the
//! previous layer's output and the same clip features.

use crate::error::{Result, StamError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Clip feature matrix `[N × D_f]` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures(Tensor);

impl ClipFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(StamError::shape("clip_features", &[0, 0], features.shape()));
        }
        if !features.all_finite() {
            return Err(StamError::domain("clip_features", "non-finite entry"));
        }
        Ok(ClipFeatures(features.with_requires_grad(false)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ClipFeatures::new(Tensor::from_rows(rows)?)
    }

    pub fn clip_count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn clip(&self, i: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.0.values()[i * d..(i + 1) * d]
    }

    /// Clips reordered so that clip `i` of the result is clip `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let d = self.feature_dim();
        let mut seen = vec![false; self.clip_count()];
        let mut values = Vec::with_capacity(self.0.numel());
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(StamError::domain(
                    "permuted",
                    format!("{order:?} is not a permutation"),
                ));
            }
            values.extend_from_slice(&self.0.values()[i * d..(i + 1) * d]);
        }
        if order.len() != seen.len() {
            return Err(StamError::domain(
                "permuted",
                format!("{order:?} is not a permutation"),
            ));
        }
        ClipFeatures::new(Tensor::matrix(order.len(), d, values)?)
    }

    /// Inserts the features into `graph` as a constant.
    pub fn insert(&self, graph: &mut Graph) -> Var {
        graph.constant(self.0.clone())
    }
}

/// Query/key width used when none is configured.
pub fn default_hidden_dim(feature_dim: usize) -> usize {
    if feature_dim >= 512 {
        512
    } else {
        feature_dim
    }
}

/// Parameter names of one global attention layer inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionLayer {
    prefix: String,
    feature_dim: usize,
    hidden_dim: usize,
    normalize_global: bool,
}

/// A layer's parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    /// Layer-norm gain and shift applied to the global feature.
    pub norm: Option<(Var, Var)>,
}

impl GlobalAttentionLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        hidden_dim: usize,
        normalize_global: bool,
    ) -> Result<Self> {
        if feature_dim == 0 || hidden_dim == 0 {
            return Err(StamError::config("attention dimensions must be positive"));
        }
        let layer = GlobalAttentionLayer {
            prefix: prefix.to_string(),
            feature_dim,
            hidden_dim,
            normalize_global,
        };
        store.register_uniform(
            &layer.name("w_q"),
            vec![hidden_dim, feature_dim],
            feature_dim,
        )?;
        store.register_uniform(
            &layer.name("w_k"),
            vec![hidden_dim, feature_dim],
            feature_dim,
        )?;
        store.register_uniform(
            &layer.name("w_v"),
            vec![feature_dim, feature_dim],
            feature_dim,
        )?;
        if normalize_global {
            store.register_constant(&layer.name("ln_gain"), vec![feature_dim], 1.0)?;
            store.register_constant(&layer.name("ln_shift"), vec![feature_dim], 0.0)?;
        }
        Ok(layer)
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn normalize_global(&self) -> bool {
        self.normalize_global
    }

    pub fn bind(&self, graph: &mut Graph, store: &ParamStore) -> Result<LayerVars> {
        let norm = if self.normalize_global {
            Some((
                graph.param(store, &self.name("ln_gain"))?,
                graph.param(store, &self.name("ln_shift"))?,
            ))
        } else {
            None
        };
        Ok(LayerVars {
            w_q: graph.param(store, &self.name("w_q"))?,
            w_k: graph.param(store, &self.name("w_k"))?,
            w_v: graph.param(store, &self.name("w_v"))?,
            norm,
        })
    }
}

/// Everything one layer computes, for metrics and tests.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub global: Var,
    pub weights: Var,
    pub scores: Var,
    /// Value vectors `[N × D_f]`.
    pub values: Var,
}

fn check_layer_inputs(graph: &Graph, global: Var, clips: Var, layer: &LayerVars) -> Result<()> {
    let wq = graph.shape(layer.w_q).to_vec();
    let wk = graph.shape(layer.w_k).to_vec();
    let (d, feat) = (wq[0], wq[1]);
    if wk != [d, feat] {
        return Err(StamError::shape("attention", &[d, feat], &wk));
    }
    if graph.shape(global) != [feat] {
        return Err(StamError::shape("attention", &[feat], graph.shape(global)));
    }
    match graph.shape(clips) {
        [_, c] if *c == feat => Ok(()),
        s => Err(StamError::shape("attention", &[0, feat], s)),
    }
}

/// Pre-softmax score of every clip: `(W_q g · W_k f_i) / √d`.
pub fn attention_scores(
    graph: &mut Graph,
    global: Var,
    clips: Var,
    layer: &LayerVars,
) -> Result<Var> {
    check_layer_inputs(graph, global, clips, layer)?;
    let d = graph.shape(layer.w_q)[0];
    let query_in = match layer.norm {
        Some((gain, shift)) => graph.layer_norm(global, gain, shift)?,
        None => global,
    };
    let query = graph.matmul(layer.w_q, query_in)?;
    let wk_t = graph.transpose(layer.w_k)?;
    let keys = graph.matmul(clips, wk_t)?;
    let raw = graph.matmul(keys, query)?;
    graph.scale(raw, 1.0 / (d as f64).sqrt())
}

pub fn layer_forward(
    graph: &mut Graph,
    global: Var,
    clips: Var,
    layer: &LayerVars,
) -> Result<LayerOutput> {
    let scores = attention_scores(graph, global, clips, layer)?;
    let weights = graph.softmax(scores)?;
    let wv_t = graph.transpose(layer.w_v)?;
    let values = graph.matmul(clips, wv_t)?;
    let next = graph.matmul(weights, values)?;
    Ok(LayerOutput {
        global: next,
        weights,
        scores,
        values,
    })
}

/// M global attention layers with untied parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StamStack {
    layers: Vec<GlobalAttentionLayer>,
}

impl StamStack {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        feature_dim: usize,
        hidden_dim: usize,
        normalize_global: bool,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(StamError::config("a stack needs at least one layer"));
        }
        let layers = (1..=depth)
            .map(|l| {
                GlobalAttentionLayer::register(
                    store,
                    &format!("{prefix}.{l}"),
                    feature_dim,
                    hidden_dim,
                    normalize_global,
                )
            })
            .collect::<Result<_>>()?;
        Ok(StamStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GlobalAttentionLayer] {
        &self.layers
    }

    pub fn bind(&self, graph: &mut Graph, store: &ParamStore) -> Result<Vec<LayerVars>> {
        self.layers.iter().map(|l| l.bind(graph, store)).collect()
    }
}

/// Per-stage graph nodes of one forward pass.
///
/// Stage 0 is the initial global feature; stage `l ≥ 1` is layer `l`'s
/// output. `weights[0]` is present only when the initializer itself weights
/// the clips.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub globals: Vec<Var>,
    pub weights: Vec<Option<Var>>,
    pub values: Vec<Option<Var>>,
}

/// Numeric copy of an [`AttentionTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceValues {
    pub globals: Vec<Vec<f64>>,
    pub weights: Vec<Option<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn stages(&self) -> usize {
        self.globals.len()
    }

    pub fn final_global(&self) -> Var {
        *self.globals.last().expect("trace has at least one stage")
    }

    pub fn snapshot(&self, graph: &Graph) -> TraceValues {
        TraceValues {
            globals: self
                .globals
                .iter()
                .map(|&g| graph.values(g).to_vec())
                .collect(),
            weights: self
                .weights
                .iter()
                .map(|w| w.map(|w| graph.values(w).to_vec()))
                .collect(),
        }
    }
}

/// Runs every layer in order starting from `g0`.
pub fn stack_forward(
    graph: &mut Graph,
    g0: Var,
    clips: Var,
    layers: &[LayerVars],
) -> Result<AttentionTrace> {
    let mut trace = AttentionTrace {
        globals: vec![g0],
        weights: vec![None],
        values: vec![None],
    };
    let mut global = g0;
    for layer in layers {
        let out = layer_forward(graph, global, clips, layer)?;
        trace.globals.push(out.global);
        trace.weights.push(Some(out.weights));
        trace.values.push(Some(out.values));
        global = out.global;
    }
    Ok(trace)
}
