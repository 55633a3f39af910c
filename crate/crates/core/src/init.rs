//! Initial global feature `g0` from the clip features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StamError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitializerKind {
    #[serde(rename = "max")]
    MaxPool,
    #[serde(rename = "avg")]
    AvgPool,
    #[serde(rename = "bigru")]
    BiGru,
    #[serde(rename = "tconv")]
    TemporalConv,
    #[serde(rename = "selfatt")]
    SelfAttention,
}

impl InitializerKind {
    pub const ALL: [InitializerKind; 5] = [
        InitializerKind::MaxPool,
        InitializerKind::AvgPool,
        InitializerKind::BiGru,
        InitializerKind::TemporalConv,
        InitializerKind::SelfAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitializerKind::MaxPool => "max",
            InitializerKind::AvgPool => "avg",
            InitializerKind::BiGru => "bigru",
            InitializerKind::TemporalConv => "tconv",
            InitializerKind::SelfAttention => "selfatt",
        }
    }

    /// Whether reordering the clips can never change `g0`.
    pub fn is_permutation_invariant(self) -> bool {
        matches!(
            self,
            InitializerKind::MaxPool | InitializerKind::AvgPool | InitializerKind::SelfAttention
        )
    }
}

impl fmt::Display for InitializerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitializerKind {
    type Err = StamError;

    fn from_str(s: &str) -> Result<Self> {
        InitializerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                StamError::config(format!(
                    "unknown initializer `{s}` (expected avg, max, bigru, tconv or selfatt)"
                ))
            })
    }
}

fn clip_dims(graph: &Graph, op: &'static str, clips: Var) -> Result<(usize, usize)> {
    match graph.shape(clips) {
        [n, d] => Ok((*n, *d)),
        s => Err(StamError::shape(op, &[0, 0], s)),
    }
}

pub fn init_avg(graph: &mut Graph, clips: Var) -> Result<Var> {
    clip_dims(graph, "init_avg", clips)?;
    graph.mean_rows(clips)
}

pub fn init_max(graph: &mut Graph, clips: Var) -> Result<Var> {
    clip_dims(graph, "init_max", clips)?;
    graph.max_rows(clips)
}

// ---------------------------------------------------------------------------
// Bidirectional GRU
// ---------------------------------------------------------------------------

const GRU_PARTS: [&str; 12] = [
    "w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn",
];

/// One GRU direction. Gates follow the usual convention
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ir: Var,
    pub w_iz: Var,
    pub w_in: Var,
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    pub b_ir: Var,
    pub b_iz: Var,
    pub b_in: Var,
    pub b_hr: Var,
    pub b_hz: Var,
    pub b_hn: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruVars {
    pub forward: GruVars,
    pub backward: GruVars,
    /// `[D_f × 2·D_f]` projection of `[h_fwd; h_bwd]`.
    pub proj_w: Var,
    pub proj_b: Var,
}

fn affine(graph: &mut Graph, w: Var, x: Var, b: Var) -> Result<Var> {
    let wx = graph.matmul(w, x)?;
    graph.add(wx, b)
}

pub fn gru_step(graph: &mut Graph, cell: &GruVars, x: Var, h: Var) -> Result<Var> {
    let xr = affine(graph, cell.w_ir, x, cell.b_ir)?;
    let hr = affine(graph, cell.w_hr, h, cell.b_hr)?;
    let r_pre = graph.add(xr, hr)?;
    let r = graph.sigmoid(r_pre)?;

    let xz = affine(graph, cell.w_iz, x, cell.b_iz)?;
    let hz = affine(graph, cell.w_hz, h, cell.b_hz)?;
    let z_pre = graph.add(xz, hz)?;
    let z = graph.sigmoid(z_pre)?;

    let xn = affine(graph, cell.w_in, x, cell.b_in)?;
    let hn = affine(graph, cell.w_hn, h, cell.b_hn)?;
    let gated = graph.mul(r, hn)?;
    let n_pre = graph.add(xn, gated)?;
    let n = graph.tanh(n_pre)?;

    let keep = graph.one_minus(z)?;
    let fresh = graph.mul(keep, n)?;
    let carried = graph.mul(z, h)?;
    graph.add(fresh, carried)
}

/// Final hidden state of one GRU pass over `order`.
fn gru_run(
    graph: &mut Graph,
    cell: &GruVars,
    clips: Var,
    order: impl Iterator<Item = usize>,
) -> Result<Var> {
    let hidden = graph.shape(cell.w_hr)[0];
    let mut h = graph.constant(crate::tensor::Tensor::zeros(vec![hidden])?);
    for t in order {
        let x = graph.row(clips, t)?;
        h = gru_step(graph, cell, x, h)?;
    }
    Ok(h)
}

pub fn init_bigru(graph: &mut Graph, clips: Var, vars: &BiGruVars) -> Result<Var> {
    let (n, _) = clip_dims(graph, "init_bigru", clips)?;
    let h_fwd = gru_run(graph, &vars.forward, clips, 0..n)?;
    let h_bwd = gru_run(graph, &vars.backward, clips, (0..n).rev())?;
    let both = graph.concat(&[h_fwd, h_bwd])?;
    affine(graph, vars.proj_w, both, vars.proj_b)
}

// ---------------------------------------------------------------------------
// Temporal convolution
// ---------------------------------------------------------------------------

/// A kernel spanning all N clips with no padding, flattened to
/// `[D_f × N·D_f]` so that tap `t` is the column block `t·D_f..(t+1)·D_f`.
#[derive(Debug, Clone, Copy)]
pub struct TconvVars {
    pub kernel: Var,
    pub bias: Var,
}

pub fn init_tconv(graph: &mut Graph, clips: Var, vars: &TconvVars) -> Result<Var> {
    let (n, d) = clip_dims(graph, "init_tconv", clips)?;
    let expected = [d, n * d];
    if graph.shape(vars.kernel) != expected {
        return Err(StamError::shape(
            "init_tconv",
            &expected,
            graph.shape(vars.kernel),
        ));
    }
    let flat = graph.reshape(clips, vec![n * d])?;
    affine(graph, vars.kernel, flat, vars.bias)
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionOutput {
    /// Attended clip vectors `[N × D_f]`.
    pub attended: Var,
    /// Row-stochastic attention matrix `[N × N]`.
    pub attention: Var,
    pub values: Var,
}

/// Single-head scaled dot-product self-attention over the clips.
pub fn self_attention(
    graph: &mut Graph,
    clips: Var,
    vars: &SelfAttentionVars,
) -> Result<SelfAttentionOutput> {
    let (_, feat) = clip_dims(graph, "self_attention", clips)?;
    let wq = graph.shape(vars.w_q).to_vec();
    if wq.len() != 2 || wq[1] != feat {
        return Err(StamError::shape("self_attention", &[0, feat], &wq));
    }
    let d = wq[0];
    let wq_t = graph.transpose(vars.w_q)?;
    let wk_t = graph.transpose(vars.w_k)?;
    let wv_t = graph.transpose(vars.w_v)?;
    let queries = graph.matmul(clips, wq_t)?;
    let keys = graph.matmul(clips, wk_t)?;
    let values = graph.matmul(clips, wv_t)?;
    let keys_t = graph.transpose(keys)?;
    let raw = graph.matmul(queries, keys_t)?;
    let scores = graph.scale(raw, 1.0 / (d as f64).sqrt())?;
    let attention = graph.softmax(scores)?;
    let attended = graph.matmul(attention, values)?;
    Ok(SelfAttentionOutput {
        attended,
        attention,
        values,
    })
}

/// `g0 = mean_i attended_i`. Also returns the effective clip weights
/// (column means of the attention matrix), so that `g0 = Σ_j w_j v_j`.
pub fn init_selfatt(
    graph: &mut Graph,
    clips: Var,
    vars: &SelfAttentionVars,
) -> Result<(Var, Var, SelfAttentionOutput)> {
    let out = self_attention(graph, clips, vars)?;
    let g0 = graph.mean_rows(out.attended)?;
    let weights = graph.mean_rows(out.attention)?;
    Ok((g0, weights, out))
}

// ---------------------------------------------------------------------------
// Registered initializer
// ---------------------------------------------------------------------------

/// An initializer whose parameters (if any) live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Initializer {
    kind: InitializerKind,
    prefix: String,
    feature_dim: usize,
    clip_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct InitOutput {
    pub global: Var,
    /// Clip weights when `g0` is a convex combination of per-clip vectors.
    pub weights: Option<Var>,
    /// The per-clip vectors those weights combine.
    pub values: Option<Var>,
}

pub fn register_self_attention(
    store: &mut ParamStore,
    prefix: &str,
    feature_dim: usize,
    hidden_dim: usize,
) -> Result<()> {
    store.register_uniform(
        &format!("{prefix}.w_q"),
        vec![hidden_dim, feature_dim],
        feature_dim,
    )?;
    store.register_uniform(
        &format!("{prefix}.w_k"),
        vec![hidden_dim, feature_dim],
        feature_dim,
    )?;
    store.register_uniform(
        &format!("{prefix}.w_v"),
        vec![feature_dim, feature_dim],
        feature_dim,
    )
}

pub fn bind_self_attention(
    graph: &mut Graph,
    store: &ParamStore,
    prefix: &str,
) -> Result<SelfAttentionVars> {
    Ok(SelfAttentionVars {
        w_q: graph.param(store, &format!("{prefix}.w_q"))?,
        w_k: graph.param(store, &format!("{prefix}.w_k"))?,
        w_v: graph.param(store, &format!("{prefix}.w_v"))?,
    })
}

impl Initializer {
    /// Registers the kind's parameters under `prefix`. `clip_count` fixes the
    /// temporal-convolution kernel length; `hidden_dim` sizes self-attention.
    pub fn register(
        store: &mut ParamStore,
        kind: InitializerKind,
        prefix: &str,
        feature_dim: usize,
        clip_count: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || clip_count == 0 || hidden_dim == 0 {
            return Err(StamError::config("initializer dimensions must be positive"));
        }
        let init = Initializer {
            kind,
            prefix: prefix.to_string(),
            feature_dim,
            clip_count,
        };
        let d = feature_dim;
        match kind {
            InitializerKind::AvgPool | InitializerKind::MaxPool => {}
            InitializerKind::BiGru => {
                for dir in ["fwd", "bwd"] {
                    for part in GRU_PARTS {
                        let shape = match &part[..1] {
                            "w" => vec![d, d],
                            _ => vec![d],
                        };
                        store.register_uniform(&init.name(&format!("{dir}.{part}")), shape, d)?;
                    }
                }
                store.register_uniform(&init.name("proj_w"), vec![d, 2 * d], 2 * d)?;
                store.register_uniform(&init.name("proj_b"), vec![d], 2 * d)?;
            }
            InitializerKind::TemporalConv => {
                let fan_in = clip_count * d;
                store.register_uniform(&init.name("kernel"), vec![d, fan_in], fan_in)?;
                store.register_uniform(&init.name("bias"), vec![d], fan_in)?;
            }
            InitializerKind::SelfAttention => {
                register_self_attention(store, prefix, feature_dim, hidden_dim)?;
            }
        }
        Ok(init)
    }

    pub fn kind(&self) -> InitializerKind {
        self.kind
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn bind_gru(&self, graph: &mut Graph, store: &ParamStore, dir: &str) -> Result<GruVars> {
        let mut p = |part: &str| graph.param(store, &self.name(&format!("{dir}.{part}")));
        Ok(GruVars {
            w_ir: p("w_ir")?,
            w_iz: p("w_iz")?,
            w_in: p("w_in")?,
            w_hr: p("w_hr")?,
            w_hz: p("w_hz")?,
            w_hn: p("w_hn")?,
            b_ir: p("b_ir")?,
            b_iz: p("b_iz")?,
            b_in: p("b_in")?,
            b_hr: p("b_hr")?,
            b_hz: p("b_hz")?,
            b_hn: p("b_hn")?,
        })
    }

    pub fn bind_bigru(&self, graph: &mut Graph, store: &ParamStore) -> Result<BiGruVars> {
        Ok(BiGruVars {
            forward: self.bind_gru(graph, store, "fwd")?,
            backward: self.bind_gru(graph, store, "bwd")?,
            proj_w: graph.param(store, &self.name("proj_w"))?,
            proj_b: graph.param(store, &self.name("proj_b"))?,
        })
    }

    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, clips: Var) -> Result<InitOutput> {
        let (n, d) = clip_dims(graph, "initializer", clips)?;
        if d != self.feature_dim {
            return Err(StamError::shape(
                "initializer",
                &[n, self.feature_dim],
                &[n, d],
            ));
        }
        match self.kind {
            InitializerKind::AvgPool => {
                let global = init_avg(graph, clips)?;
                let uniform = crate::tensor::Tensor::full(vec![n], 1.0 / n as f64)?;
                Ok(InitOutput {
                    global,
                    weights: Some(graph.constant(uniform)),
                    values: Some(clips),
                })
            }
            InitializerKind::MaxPool => Ok(InitOutput {
                global: init_max(graph, clips)?,
                weights: None,
                values: None,
            }),
            InitializerKind::BiGru => {
                let vars = self.bind_bigru(graph, store)?;
                Ok(InitOutput {
                    global: init_bigru(graph, clips, &vars)?,
                    weights: None,
                    values: None,
                })
            }
            InitializerKind::TemporalConv => {
                if n != self.clip_count {
                    return Err(StamError::shape(
                        "init_tconv",
                        &[self.clip_count, d],
                        &[n, d],
                    ));
                }
                let vars = TconvVars {
                    kernel: graph.param(store, &self.name("kernel"))?,
                    bias: graph.param(store, &self.name("bias"))?,
                };
                Ok(InitOutput {
                    global: init_tconv(graph, clips, &vars)?,
                    weights: None,
                    values: None,
                })
            }
            InitializerKind::SelfAttention => {
                let vars = bind_self_attention(graph, store, &self.prefix)?;
                let (global, weights, out) = init_selfatt(graph, clips, &vars)?;
                Ok(InitOutput {
                    global,
                    weights: Some(weights),
                    values: Some(out.values),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn clips(graph: &mut Graph, rows: &[Vec<f64>]) -> Var {
        graph.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in InitializerKind::ALL {
            assert_eq!(k.as_str().parse::<InitializerKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("mean".parse::<InitializerKind>().is_err());
    }

    #[test]
    fn avg_and_max_pooling() {
        let mut g = Graph::new();
        let f = clips(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let avg = init_avg(&mut g, f).unwrap();
        assert_eq!(g.values(avg), &[2.0, 3.0]);
        let f = clips(&mut g, &[vec![1.0, 5.0], vec![3.0, 2.0]]);
        let max = init_max(&mut g, f).unwrap();
        assert_eq!(g.values(max), &[3.0, 5.0]);
        let single = clips(&mut g, &[vec![0.25, -7.0]]);
        let a = init_avg(&mut g, single).unwrap();
        let m = init_max(&mut g, single).unwrap();
        assert_eq!(g.values(a), &[0.25, -7.0]);
        assert_eq!(g.values(m), &[0.25, -7.0]);
    }

    #[test]
    fn zero_bigru_outputs_projection_bias() {
        let mut store = ParamStore::new(3);
        let init =
            Initializer::register(&mut store, InitializerKind::BiGru, "init", 3, 4, 3).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let n = store.get(&name).unwrap().numel();
            if name != "init.proj_b" {
                store.set_values(&name, &vec![0.0; n]).unwrap();
            }
        }
        store.set_values("init.proj_b", &[0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let f = clips(
            &mut g,
            &[
                vec![1.0, 2.0, 3.0],
                vec![-1.0, 0.0, 4.0],
                vec![0.0; 3],
                vec![9.0, 9.0, 9.0],
            ],
        );
        let out = init.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.values(out.global), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn tconv_averaging_and_selector_kernels() {
        let (n, d) = (3, 2);
        let rows = vec![vec![1.0, -2.0], vec![0.5, 4.0], vec![3.0, 1.0]];
        let mut store = ParamStore::new(0);
        let init =
            Initializer::register(&mut store, InitializerKind::TemporalConv, "init", d, n, d)
                .unwrap();
        store.set_values("init.bias", &[0.0, 0.0]).unwrap();

        let mut kernel = vec![0.0; d * n * d];
        for t in 0..n {
            for c in 0..d {
                kernel[c * n * d + t * d + c] = 1.0 / n as f64;
            }
        }
        store.set_values("init.kernel", &kernel).unwrap();
        let mut g = Graph::new();
        let f = clips(&mut g, &rows);
        let out = init.forward(&mut g, &store, f).unwrap();
        let mean = [(1.0 + 0.5 + 3.0) / 3.0, (-2.0 + 4.0 + 1.0) / 3.0];
        for (a, b) in g.values(out.global).iter().zip(mean) {
            assert!((a - b).abs() < 1e-15);
        }

        // tap 1 only, channel mix [[0,1],[2,0]]
        let mut kernel = vec![0.0; d * n * d];
        kernel[2 + 1] = 1.0;
        kernel[n * d + 2] = 2.0;
        store.set_values("init.kernel", &kernel).unwrap();
        let mut g = Graph::new();
        let f = clips(&mut g, &rows);
        let out = init.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.values(out.global), &[4.0, 1.0]);
    }

    #[test]
    fn tconv_rejects_wrong_clip_count() {
        let mut store = ParamStore::new(0);
        let init =
            Initializer::register(&mut store, InitializerKind::TemporalConv, "init", 2, 3, 2)
                .unwrap();
        let mut g = Graph::new();
        let f = clips(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(init.forward(&mut g, &store, f).is_err());
    }

    #[test]
    fn selfatt_singleton_and_identical_clips() {
        let mut store = ParamStore::new(9);
        let init =
            Initializer::register(&mut store, InitializerKind::SelfAttention, "init", 2, 1, 2)
                .unwrap();
        let wv = store.get("init.w_v").unwrap().values().to_vec();
        let f1 = [0.3, -1.2];
        let wv_f1 = [wv[0] * f1[0] + wv[1] * f1[1], wv[2] * f1[0] + wv[3] * f1[1]];

        let mut g = Graph::new();
        let f = clips(&mut g, &[f1.to_vec()]);
        let out = init.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.values(out.weights.unwrap()), &[1.0]);
        assert_eq!(g.values(out.global), &wv_f1);

        let mut g = Graph::new();
        let f = clips(&mut g, &[f1.to_vec(), f1.to_vec(), f1.to_vec()]);
        let out = init.forward(&mut g, &store, f).unwrap();
        for w in g.values(out.weights.unwrap()) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        for (a, b) in g.values(out.global).iter().zip(wv_f1) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
