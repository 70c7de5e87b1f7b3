//! Metrics: accuracy, ROC-AUC, worst-environment scores, alignment of node
//! scores with motif masks, and an InfoNCE estimate.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::model::{Inference, Model, ModelError};

/// Fraction of matching entries; `None` for empty input.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Option<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return None;
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Some(hits as f64 / preds.len() as f64)
}

/// Binary ROC-AUC by the rank statistic, ties sharing their mid-rank.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // twice the positive rank sum, kept integral so mid-ranks stay exact
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let hits = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        rank_sum2 += hits * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    Some((rank_sum2 - p * (p + 1)) as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC over classes with both sides present; binary
/// problems use the positive-class column directly.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<f64> {
    let per_class = |c: usize| {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        roc_auc(&s, &y)
    };
    if classes == 2 {
        return per_class(1);
    }
    let aucs: Vec<f64> = (0..classes).filter_map(per_class).collect();
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// Minimum over environments; `None` for no environments.
pub fn worst_env(per_env: &BTreeMap<String, f64>) -> Option<f64> {
    per_env.values().copied().reduce(f64::min)
}

/// AUC of node scores as a predictor of mask membership, pooled over all
/// graphs that carry a mask.
pub fn invariance_alignment(node_scores: &[Vec<f64>], graphs: &[Graph]) -> Option<f64> {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (scores, g) in node_scores.iter().zip(graphs) {
        if let Some(mask) = &g.invariance_mask {
            s.extend_from_slice(scores);
            y.extend_from_slice(mask);
        }
    }
    roc_auc(&s, &y)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// `mean_i log(e^{phi(x_i, y_i)} / ((1/K) sum_j e^{phi(x_i, y_j)}))` with
/// `phi(a, b) = <a/|a|, b/|b|> / tau`. Never exceeds `ln K`.
pub fn infonce_estimate(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> Option<f64> {
    let k = x.len();
    if k < 2 || y.len() != k {
        return None;
    }
    let xs: Vec<Vec<f64>> = x.iter().map(|v| unit(v)).collect();
    let ys: Vec<Vec<f64>> = y.iter().map(|v| unit(v)).collect();
    let mut total = 0.0;
    for (i, xi) in xs.iter().enumerate() {
        let logits: Vec<f64> = ys
            .iter()
            .map(|yj| xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += logits[i] - (lse - (k as f64).ln());
    }
    Some(total / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvMetric {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub count: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub per_env: BTreeMap<String, EnvMetric>,
    pub worst_env_accuracy: Option<f64>,
    pub invariance_alignment: Option<f64>,
}

impl SplitReport {
    pub fn from_inference(inf: &Inference, graphs: &[Graph], classes: usize) -> Self {
        let preds = inf.predictions();
        let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (g, (p, y)) in graphs.iter().zip(preds.iter().zip(&labels)) {
            let e = groups.entry(g.env_id.clone()).or_default();
            e.0 += 1;
            e.1 += usize::from(p == y);
        }
        let per_env: BTreeMap<String, EnvMetric> = groups
            .into_iter()
            .map(|(k, (n, hit))| {
                (k, EnvMetric {
                    count: n,
                    accuracy: hit as f64 / n as f64,
                })
            })
            .collect();
        let env_acc: BTreeMap<String, f64> = per_env.iter().map(|(k, m)| (k.clone(), m.accuracy)).collect();
        Self {
            count: graphs.len(),
            accuracy: accuracy(&preds, &labels).unwrap_or(0.0),
            auc: macro_auc(&inf.probs, &labels, classes),
            worst_env_accuracy: worst_env(&env_acc),
            invariance_alignment: invariance_alignment(&inf.node_scores, graphs),
            per_env,
        }
    }
}

/// Evaluates one split with frozen parameters.
pub fn evaluate(model: &Model, graphs: &[Graph], filter: bool) -> Result<SplitReport, ModelError> {
    let inf = model.infer(graphs, filter, 256)?;
    Ok(SplitReport::from_inference(&inf, graphs, model.spec.classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub config_hash: String,
    pub dataset_digest: Option<String>,
    pub splits: BTreeMap<String, SplitReport>,
}

/// One CSV row per graph: `index,label,env,z0..z{d-1}`.
pub fn write_embeddings_csv(path: &Path, embeddings: &[Vec<f64>], graphs: &[Graph]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = embeddings.first().map_or(0, Vec::len);
    write!(f, "index,label,env")?;
    for k in 0..d {
        write!(f, ",z{k}")?;
    }
    writeln!(f)?;
    for (i, (z, g)) in embeddings.iter().zip(graphs).enumerate() {
        write!(f, "{i},{},{}", g.label, g.env_id)?;
        for v in z {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()
}
