//! Full models: an initializer, an optional global attention stack and one
//! classifier head per stage; or the vanilla self-attention stack baseline.

use serde::{Deserialize, Serialize};

use crate::attention::{
    default_hidden_dim, stack_forward, AttentionTrace, ClipFeatures, StamStack,
};
use crate::error::{Result, StamError};
use crate::graph::{Graph, Var};
use crate::heads::{classify, combined_loss, ClassifierHead, HeadVars, LossWeights};
use crate::init::{
    bind_self_attention, register_self_attention, self_attention, Initializer, InitializerKind,
};
use crate::params::ParamStore;

/// Parameter-name prefix shared by the initializer and the first vanilla
/// self-attention layer, so both build the same first layer from one seed.
pub const INIT_PREFIX: &str = "init";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_initializer")]
    pub initializer: InitializerKind,
    /// Number of global attention layers M (0 = initializer and head only).
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Query/key width; defaults to `min(D_f, 512)`.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize_global: bool,
}

fn default_initializer() -> InitializerKind {
    InitializerKind::SelfAttention
}

fn default_layers() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            initializer: default_initializer(),
            layers: default_layers(),
            hidden_dim: None,
            normalize_global: true,
        }
    }
}

impl ModelSpec {
    pub fn hidden_dim_for(&self, feature_dim: usize) -> usize {
        self.hidden_dim
            .unwrap_or_else(|| default_hidden_dim(feature_dim))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub feature_dim: usize,
    pub clip_count: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Stam {
        init: Initializer,
        stack: Option<StamStack>,
    },
    Vanilla {
        prefixes: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    body: Body,
    heads: Vec<ClassifierHead>,
    loss_weights: LossWeights,
    dims: Dims,
}

fn register_heads(
    store: &mut ParamStore,
    stages: usize,
    dims: Dims,
) -> Result<Vec<ClassifierHead>> {
    (0..stages)
        .map(|i| {
            ClassifierHead::register(
                store,
                &format!("head.{i}"),
                dims.feature_dim,
                dims.num_classes,
            )
        })
        .collect()
}

fn loss_weights(lambdas: Option<Vec<f64>>, stages: usize) -> Result<LossWeights> {
    let w = match lambdas {
        Some(l) => LossWeights::new(l)?,
        None => LossWeights::ones(stages)?,
    };
    if w.len() != stages {
        return Err(StamError::config(format!(
            "model has {stages} stages but {} loss weights were given",
            w.len()
        )));
    }
    Ok(w)
}

impl Model {
    pub fn stam(
        store: &mut ParamStore,
        spec: &ModelSpec,
        dims: Dims,
        lambdas: Option<Vec<f64>>,
    ) -> Result<Self> {
        let hidden = spec.hidden_dim_for(dims.feature_dim);
        let init = Initializer::register(
            store,
            spec.initializer,
            INIT_PREFIX,
            dims.feature_dim,
            dims.clip_count,
            hidden,
        )?;
        let stack = match spec.layers {
            0 => None,
            m => Some(StamStack::register(
                store,
                "stam",
                m,
                dims.feature_dim,
                hidden,
                spec.normalize_global,
            )?),
        };
        let stages = spec.layers + 1;
        let heads = register_heads(store, stages, dims)?;
        Ok(Model {
            body: Body::Stam { init, stack },
            heads,
            loss_weights: loss_weights(lambdas, stages)?,
            dims,
        })
    }

    /// `depth` plain self-attention layers over the clip features, each
    /// feeding its attended vectors to the next; stage `l` is the mean of
    /// layer `l`'s output.
    pub fn vanilla(
        store: &mut ParamStore,
        depth: usize,
        hidden_dim: usize,
        dims: Dims,
        lambdas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(StamError::config("vanilla stack needs at least one layer"));
        }
        let prefixes: Vec<String> = (0..depth)
            .map(|l| match l {
                0 => INIT_PREFIX.to_string(),
                l => format!("vanilla.{l}"),
            })
            .collect();
        for p in &prefixes {
            register_self_attention(store, p, dims.feature_dim, hidden_dim)?;
        }
        let heads = register_heads(store, depth, dims)?;
        Ok(Model {
            body: Body::Vanilla { prefixes },
            heads,
            loss_weights: loss_weights(lambdas, depth)?,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.loss_weights
    }

    pub fn heads(&self) -> &[ClassifierHead] {
        &self.heads
    }

    pub fn initializer(&self) -> Option<&Initializer> {
        match &self.body {
            Body::Stam { init, .. } => Some(init),
            Body::Vanilla { .. } => None,
        }
    }

    pub fn stack(&self) -> Option<&StamStack> {
        match &self.body {
            Body::Stam { stack, .. } => stack.as_ref(),
            Body::Vanilla { .. } => None,
        }
    }

    /// Parameter prefixes of the vanilla layers, first layer first.
    pub fn vanilla_layers(&self) -> Option<&[String]> {
        match &self.body {
            Body::Vanilla { prefixes } => Some(prefixes),
            Body::Stam { .. } => None,
        }
    }

    pub fn bind_heads(&self, graph: &mut Graph, store: &ParamStore) -> Result<Vec<HeadVars>> {
        self.heads.iter().map(|h| h.bind(graph, store)).collect()
    }

    fn check_clips(&self, clips: &ClipFeatures) -> Result<()> {
        if clips.feature_dim() != self.dims.feature_dim {
            return Err(StamError::shape(
                "model",
                &[clips.clip_count(), self.dims.feature_dim],
                clips.tensor().shape(),
            ));
        }
        Ok(())
    }

    /// Forward pass through every stage of the body (heads not applied).
    pub fn forward(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        clips: &ClipFeatures,
    ) -> Result<AttentionTrace> {
        self.check_clips(clips)?;
        let f = clips.insert(graph);
        match &self.body {
            Body::Stam { init, stack } => {
                let start = init.forward(graph, store, f)?;
                let layers = match stack {
                    Some(s) => s.bind(graph, store)?,
                    None => Vec::new(),
                };
                let mut trace = stack_forward(graph, start.global, f, &layers)?;
                trace.weights[0] = start.weights;
                trace.values[0] = start.values;
                Ok(trace)
            }
            Body::Vanilla { prefixes } => {
                let mut trace = AttentionTrace::default();
                let mut x = f;
                for p in prefixes {
                    let vars = bind_self_attention(graph, store, p)?;
                    let out = self_attention(graph, x, &vars)?;
                    trace.globals.push(graph.mean_rows(out.attended)?);
                    trace.weights.push(Some(graph.mean_rows(out.attention)?));
                    trace.values.push(Some(out.values));
                    x = out.attended;
                }
                Ok(trace)
            }
        }
    }

    /// Weighted deep-supervision loss for one sample.
    pub fn loss(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        trace: &AttentionTrace,
        label: usize,
    ) -> Result<Var> {
        let heads = self.bind_heads(graph, store)?;
        combined_loss(graph, trace, &heads, label, &self.loss_weights)
    }

    /// Logits of every stage's head.
    pub fn stage_logits(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        trace: &AttentionTrace,
    ) -> Result<Vec<Var>> {
        let heads = self.bind_heads(graph, store)?;
        trace
            .globals
            .iter()
            .zip(&heads)
            .map(|(&g, h)| classify(graph, g, h))
            .collect()
    }
}
