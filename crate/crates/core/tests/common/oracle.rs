//! Scalar-loop reference implementations of the encoder pieces, written
//! against raw parameter buffers with no tape involvement.

use iglab::encoder::{Encoder, Layer, Linear, Mlp};
use iglab::graph::Graph;
use iglab::tensor::ParamStore;

pub type Rows = Vec<Vec<f64>>;

pub fn linear(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    let w = store.get(l.weight);
    let b = store.get(l.bias).data();
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fan_in);
            (0..fan_out)
                .map(|j| b[j] + (0..fan_in).map(|i| row[i] * w.data()[i * fan_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn relu(x: Rows) -> Rows {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Rows) -> Rows {
    linear(store, &m.second, &relu(linear(store, &m.first, x)))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// GIN stack via a dense in-adjacency matrix `A[v][u]` = number of `u -> v` edges.
pub fn gin_nodes(enc: &Encoder, store: &ParamStore, g: &Graph) -> Rows {
    let n = g.num_nodes;
    let mut adj = vec![vec![0.0; n]; n];
    for &(u, v) in &g.edges {
        adj[v][u] += 1.0;
    }
    let mut h = g.features.clone();
    for (l, layer) in enc.layers.iter().enumerate() {
        let Layer::Gin(gin) = layer else { panic!("oracle covers GIN only") };
        let eps = store.get(gin.eps).data()[0];
        let d = h[0].len();
        let pre: Rows = (0..n)
            .map(|v| (0..d).map(|k| (1.0 + eps) * h[v][k] + (0..n).map(|u| adj[v][u] * h[u][k]).sum::<f64>()).collect())
            .collect();
        h = mlp(store, &gin.mlp, &pre);
        if l + 1 < enc.layers.len() {
            h = relu(h);
        }
    }
    h
}

pub fn node_scores(enc: &Encoder, store: &ParamStore, h: &Rows) -> Vec<f64> {
    let att = &enc.node_attention;
    let d = h[0].len();
    let proj = |id| -> Rows {
        let w = store.get(id).data();
        h.iter().map(|r| (0..d).map(|j| (0..d).map(|i| r[i] * w[i * d + j]).sum()).collect()).collect()
    };
    let (q, k, v) = (proj(att.wq), proj(att.wk), proj(att.wv));
    let p = store.get(att.proj).data();
    let b = store.get(att.bias).data()[0];
    let n = h.len();
    (0..n)
        .map(|a| {
            let logits: Vec<f64> =
                (0..n).map(|c| (0..d).map(|j| q[a][j] * k[c][j]).sum::<f64>() / (d as f64).sqrt()).collect();
            let s = softmax(&logits);
            let attended: Vec<f64> = (0..d).map(|j| (0..n).map(|c| s[c] * v[c][j]).sum()).collect();
            sigmoid(b + (0..d).map(|j| attended[j] * p[j]).sum::<f64>())
        })
        .collect()
}

pub fn edge_scores(enc: &Encoder, store: &ParamStore, h: &Rows, edges: &[(usize, usize)]) -> Vec<f64> {
    let raw: Vec<f64> = edges
        .iter()
        .map(|&(u, v)| {
            let pair: Vec<f64> = h[u].iter().chain(&h[v]).copied().collect();
            let s = mlp(store, &enc.edge_scorer.mlp, &vec![pair])[0][0];
            if s >= 0.0 {
                s
            } else {
                0.2 * s
            }
        })
        .collect();
    edges
        .iter()
        .enumerate()
        .map(|(e, &(_, v))| {
            let group: Vec<usize> = (0..edges.len()).filter(|&f| edges[f].1 == v).collect();
            let m = group.iter().map(|&f| raw[f]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = group.iter().map(|&f| (raw[f] - m).exp()).sum();
            let soft = (raw[e] - m).exp() / z;
            sigmoid(soft * group.len() as f64)
        })
        .collect()
}

pub fn readout(
    enc: &Encoder,
    store: &ParamStore,
    h: &Rows,
    alpha: &[f64],
    edges: &[(usize, usize)],
    beta: &[f64],
) -> Vec<f64> {
    let d = h[0].len();
    let mut pooled = vec![0.0; 2 * d];
    for (v, row) in h.iter().enumerate() {
        for k in 0..d {
            pooled[k] += alpha[v] * row[k] / h.len() as f64;
        }
    }
    for (e, &(u, v)) in edges.iter().enumerate() {
        for k in 0..d {
            pooled[d + k] += beta[e] * 0.5 * (h[u][k] + h[v][k]) / edges.len() as f64;
        }
    }
    linear(store, &enc.readout, &vec![pooled]).remove(0)
}

pub struct Forward {
    pub nodes: Rows,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub graph: Vec<f64>,
}

pub fn forward(enc: &Encoder, store: &ParamStore, g: &Graph) -> Forward {
    let nodes = gin_nodes(enc, store, g);
    let alpha = node_scores(enc, store, &nodes);
    let beta = edge_scores(enc, store, &nodes, &g.edges);
    let graph = readout(enc, store, &nodes, &alpha, &g.edges, &beta);
    Forward { nodes, alpha, beta, graph }
}

/// Brute-force oracle: repeatedly extract the minimum-distance unused
/// candidate, lower index winning ties.
pub fn hard_negatives(z: &[Vec<f64>], labels: &[usize], w: &[f64], c: usize, k: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    };
    let mut left: Vec<usize> = (0..z.len()).filter(|&j| labels[j] != c).collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if 1.0 - cos(w, &z[left[p]]) < 1.0 - cos(w, &z[left[best]]) {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Center refinement by explicit loops: `w = normalize(sum_i m_i z_i)` with
/// `m = softmax_i(cos(z_i, w_old))` over the class members.
pub fn center_update(old: &[f64], members: &[Vec<f64>]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = members
        .iter()
        .map(|z| z.iter().zip(old).map(|(a, b)| a * b).sum::<f64>() / (norm(z) * norm(old)))
        .collect();
    let top = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = cos.iter().map(|c| (c - top).exp()).collect();
    let total: f64 = e.iter().sum();
    let mut w = vec![0.0; old.len()];
    for (z, ei) in members.iter().zip(&e) {
        for (acc, x) in w.iter_mut().zip(z) {
            *acc += ei / total * x;
        }
    }
    let n = norm(&w);
    w.iter().map(|x| x / n).collect()
}
