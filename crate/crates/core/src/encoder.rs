//! Graph encoder: message passing, the attention redundancy filter, and
//! score-weighted readout to one embedding per graph.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Batch;
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Negative slope of the LeakyReLU on raw edge scores.
pub const EDGE_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gin,
    Gcn,
    Gat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    #[serde(default)]
    pub backbone: Backbone,
}

/// `x @ weight + bias` with `weight: [in, out]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Two linear layers with a ReLU (and optional dropout) in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        activation: bool,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let mut h = self.first.forward(tape, store, x)?;
        if activation {
            h = tape.relu(h)?;
        }
        if let Some((p, rng)) = dropout {
            h = apply_dropout(tape, h, p, rng)?;
        }
        self.second.forward(tape, store, h)
    }
}

/// Inverted dropout with a constant keep mask.
pub fn apply_dropout(tape: &Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let mask = (0..n)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?)?;
    tape.mul(x, m)
}

/// One GIN update: `h_v <- MLP((1 + eps) h_v + sum_{u -> v} h_u)`.
#[derive(Clone, Debug)]
pub struct GinLayer {
    pub mlp: Mlp,
    pub eps: ParamId,
}

impl GinLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), [fan_in, dim, dim], rng),
            eps: store.add(format!("{name}.eps"), Tensor::vector(vec![0.0])),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        h: Var,
        batch: &Batch,
        mlp_activation: bool,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let eps = tape.param(store, self.eps);
        let one = tape.constant(Tensor::vector(vec![1.0]))?;
        let scale = tape.add(eps, one)?;
        let mut pre = tape.mul(h, scale)?;
        if batch.num_edges() > 0 {
            let msgs = tape.gather_rows(h, batch.src.clone())?;
            let agg = tape.scatter_add_rows(msgs, batch.dst.clone(), batch.num_nodes())?;
            pre = tape.add(pre, agg)?;
        }
        self.mlp.forward(tape, store, pre, mlp_activation, dropout)
    }
}

/// Mean over the closed in-neighbourhood followed by a linear map.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub linear: Linear,
}

impl GcnLayer {
    pub fn forward(&self, tape: &Tape, store: &ParamStore, h: Var, batch: &Batch) -> Result<Var> {
        let mut sum = h;
        if batch.num_edges() > 0 {
            let msgs = tape.gather_rows(h, batch.src.clone())?;
            let agg = tape.scatter_add_rows(msgs, batch.dst.clone(), batch.num_nodes())?;
            sum = tape.add(h, agg)?;
        }
        let inv: Vec<f64> = batch.in_degree.iter().map(|&d| 1.0 / (d + 1) as f64).collect();
        let inv = tape.constant(Tensor::new(vec![inv.len(), 1], inv)?)?;
        let mean = tape.mul(sum, inv)?;
        self.linear.forward(tape, store, mean)
    }
}

/// Attention-weighted neighbourhood sum with self loops, scored as
/// `LeakyReLU(a_src . Wh_u + a_dst . Wh_v)`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub linear: Linear,
    pub att_src: ParamId,
    pub att_dst: ParamId,
}

impl GatLayer {
    pub fn forward(&self, tape: &Tape, store: &ParamStore, h: Var, batch: &Batch) -> Result<Var> {
        let n = batch.num_nodes();
        let wh = self.linear.forward(tape, store, h)?;
        let src: Arc<[usize]> = batch.src.iter().copied().chain(0..n).collect();
        let dst: Arc<[usize]> = batch.dst.iter().copied().chain(0..n).collect();
        let s_src = tape.matmul(wh, tape.param(store, self.att_src))?;
        let s_dst = tape.matmul(wh, tape.param(store, self.att_dst))?;
        let e_src = tape.gather_rows(s_src, src.clone())?;
        let e_dst = tape.gather_rows(s_dst, dst.clone())?;
        let raw = tape.leaky_relu(tape.add(e_src, e_dst)?, EDGE_LEAKY_SLOPE)?;
        let alpha = tape.segment_softmax(raw, dst.clone())?;
        let msgs = tape.mul(tape.gather_rows(wh, src)?, alpha)?;
        tape.scatter_add_rows(msgs, dst, n)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Gin(GinLayer),
    Gcn(GcnLayer),
    Gat(GatLayer),
}

/// Self-attention node scorer: per graph `S = softmax(Q K^T / sqrt(d))`,
/// `A = S V`, then `alpha_v = sigmoid(A_v . proj + bias)`.
#[derive(Clone, Debug)]
pub struct NodeAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
}

impl NodeAttention {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add_glorot("attn.wq", d, d, rng),
            wk: store.add_glorot("attn.wk", d, d, rng),
            wv: store.add_glorot("attn.wv", d, d, rng),
            proj: store.add_glorot("attn.proj", d, 1, rng),
            bias: store.add("attn.bias", Tensor::vector(vec![0.0])),
        }
    }

    /// Attended rows `A` for every node, `[N, d]`.
    pub fn attended(&self, tape: &Tape, store: &ParamStore, h: Var, batch: &Batch) -> Result<Var> {
        let q = tape.matmul(h, tape.param(store, self.wq))?;
        let k = tape.matmul(h, tape.param(store, self.wk))?;
        let v = tape.matmul(h, tape.param(store, self.wv))?;
        let d_k = tape.shape(k)[1] as f64;
        let scale = 1.0 / d_k.sqrt();
        let per_graph = |q: Var, k: Var, v: Var| -> Result<Var> {
            let logits = tape.matmul(q, tape.transpose(k)?)?;
            let s = tape.softmax(tape.scale(logits, scale)?, 1)?;
            tape.matmul(s, v)
        };
        if batch.num_graphs() == 1 {
            return per_graph(q, k, v);
        }
        let mut parts = Vec::with_capacity(batch.num_graphs());
        for g in 0..batch.num_graphs() {
            let r = batch.node_range(g);
            parts.push(per_graph(
                tape.slice_rows(q, r.start, r.end)?,
                tape.slice_rows(k, r.start, r.end)?,
                tape.slice_rows(v, r.start, r.end)?,
            )?);
        }
        tape.concat(&parts, 0)
    }

    /// Node scores `[N, 1]`, each in (0, 1).
    pub fn forward(&self, tape: &Tape, store: &ParamStore, h: Var, batch: &Batch) -> Result<Var> {
        let a = self.attended(tape, store, h, batch)?;
        let s = tape.matmul(a, tape.param(store, self.proj))?;
        tape.sigmoid(tape.add(s, tape.param(store, self.bias))?)
    }
}

/// Edge scorer: `raw = LeakyReLU(MLP(h_u || h_v))`, softmax over edges that
/// share a destination, rescaled by in-degree, then squashed by sigmoid.
#[derive(Clone, Debug)]
pub struct EdgeScorer {
    pub mlp: Mlp,
}

impl EdgeScorer {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "edge", [2 * d, d, 1], rng),
        }
    }

    /// Edge scores `[E, 1]` given gathered endpoint rows.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, h_src: Var, h_dst: Var, batch: &Batch) -> Result<Var> {
        let pair = tape.concat(&[h_src, h_dst], 1)?;
        let raw = self.mlp.forward(tape, store, pair, true, None)?;
        let raw = tape.leaky_relu(raw, EDGE_LEAKY_SLOPE)?;
        let soft = tape.segment_softmax(raw, batch.dst.clone())?;
        let deg: Vec<f64> = batch.dst.iter().map(|&v| batch.in_degree[v] as f64).collect();
        let deg = tape.constant(Tensor::new(vec![deg.len(), 1], deg)?)?;
        tape.sigmoid(tape.mul(soft, deg)?)
    }
}

/// Output of [`Encoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[N, d]` node embeddings from the backbone.
    pub node_emb: Var,
    /// `[N, 1]`; `None` when the filter is bypassed.
    pub node_scores: Option<Var>,
    /// `[E, 1]`; `None` when bypassed or the batch has no edges.
    pub edge_scores: Option<Var>,
    /// `[G, d]`.
    pub graph_emb: Var,
}

/// Per-call switches for [`Encoder::forward`].
pub struct ForwardOptions<'a> {
    /// `false` forces every score to 1.
    pub filter: bool,
    /// Enables dropout in the backbone MLPs.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self {
            filter: true,
            dropout_rng: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
    pub node_attention: NodeAttention,
    pub edge_scorer: EdgeScorer,
    pub readout: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.emb_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let fan_in = if l == 0 { config.input_dim } else { d };
                let name = format!("layer{l}");
                match config.backbone {
                    Backbone::Gin => Layer::Gin(GinLayer::new(store, &name, fan_in, d, rng)),
                    Backbone::Gcn => Layer::Gcn(GcnLayer {
                        linear: Linear::new(store, &name, fan_in, d, rng),
                    }),
                    Backbone::Gat => Layer::Gat(GatLayer {
                        linear: Linear::new(store, &name, fan_in, d, rng),
                        att_src: store.add_glorot(format!("{name}.att_src"), d, 1, rng),
                        att_dst: store.add_glorot(format!("{name}.att_dst"), d, 1, rng),
                    }),
                }
            })
            .collect();
        Self {
            node_attention: NodeAttention::new(store, d, rng),
            edge_scorer: EdgeScorer::new(store, d, rng),
            readout: Linear::new(store, "readout", 2 * d, d, rng),
            layers,
            config,
        }
    }

    /// Backbone only: `[N, d]` node embeddings.
    pub fn node_embeddings(
        &self,
        tape: &Tape,
        store: &ParamStore,
        batch: &Batch,
        opts: &mut ForwardOptions,
    ) -> Result<Var> {
        let x = Tensor::new(vec![batch.num_nodes(), batch.feature_dim], batch.features.clone())?;
        let mut h = tape.constant(x)?;
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Gin(gin) => {
                    let dropout = opts
                        .dropout_rng
                        .as_deref_mut()
                        .map(|rng| (self.config.dropout, rng));
                    gin.forward(tape, store, h, batch, true, dropout)?
                }
                Layer::Gcn(gcn) => gcn.forward(tape, store, h, batch)?,
                Layer::Gat(gat) => gat.forward(tape, store, h, batch)?,
            };
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        batch: &Batch,
        opts: &mut ForwardOptions,
    ) -> Result<Encoded> {
        let h = self.node_embeddings(tape, store, batch, opts)?;
        let has_edges = batch.num_edges() > 0;
        let (h_src, h_dst) = if has_edges {
            (
                Some(tape.gather_rows(h, batch.src.clone())?),
                Some(tape.gather_rows(h, batch.dst.clone())?),
            )
        } else {
            (None, None)
        };
        let (node_scores, edge_scores) = if opts.filter {
            let ns = self.node_attention.forward(tape, store, h, batch)?;
            let es = match (h_src, h_dst) {
                (Some(s), Some(d)) => Some(self.edge_scorer.forward(tape, store, s, d, batch)?),
                _ => None,
            };
            (Some(ns), es)
        } else {
            (None, None)
        };
        let graph_emb = readout(
            tape,
            store,
            &self.readout,
            h,
            node_scores,
            h_src.zip(h_dst),
            edge_scores,
            batch,
        )?;
        Ok(Encoded {
            node_emb: h,
            node_scores,
            edge_scores,
            graph_emb,
        })
    }
}

/// `h_G = Linear(mean_v(alpha_v h_v) || mean_uv(alpha_uv (h_u + h_v) / 2))`.
/// Missing scores count as 1; a graph without edges gets a zero edge term.
#[allow(clippy::too_many_arguments)]
pub fn readout(
    tape: &Tape,
    store: &ParamStore,
    linear: &Linear,
    h: Var,
    node_scores: Option<Var>,
    endpoints: Option<(Var, Var)>,
    edge_scores: Option<Var>,
    batch: &Batch,
) -> Result<Var> {
    let g = batch.num_graphs();
    let d = tape.shape(h)[1];
    let weighted = match node_scores {
        Some(a) => tape.mul(h, a)?,
        None => h,
    };
    let node_sum = tape.scatter_add_rows(weighted, batch.node_graph.clone(), g)?;
    let inv_n: Vec<f64> = (0..g).map(|i| 1.0 / batch.node_range(i).len() as f64).collect();
    let node_term = tape.mul(node_sum, tape.constant(Tensor::new(vec![g, 1], inv_n)?)?)?;

    let edge_term = match endpoints {
        Some((hs, hd)) => {
            let emb = tape.scale(tape.add(hs, hd)?, 0.5)?;
            let emb = match edge_scores {
                Some(a) => tape.mul(emb, a)?,
                None => emb,
            };
            let sum = tape.scatter_add_rows(emb, batch.edge_graph.clone(), g)?;
            let inv_e: Vec<f64> = (0..g)
                .map(|i| 1.0 / batch.edge_range(i).len().max(1) as f64)
                .collect();
            tape.mul(sum, tape.constant(Tensor::new(vec![g, 1], inv_e)?)?)?
        }
        None => tape.constant(Tensor::zeros(vec![g, d]))?,
    };
    let pooled = tape.concat(&[node_term, edge_term], 1)?;
    linear.forward(tape, store, pooled)
}
