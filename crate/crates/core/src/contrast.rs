//! Projection head, semantic centers, and the contrastive and prediction
//! losses that make up the training objective.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Linear, Mlp};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("invalid contrast config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ContrastError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    /// Semantic temperature.
    pub tau: f64,
    /// Instance temperature.
    pub tau_instance: f64,
    /// Weight kept on the instance in the constraint mix.
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    /// Hard negatives per instance.
    pub hard_negatives: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            tau_instance: 0.2,
            lambda_c: 0.7,
            lambda_s: 0.8,
            lambda_i: 0.2,
            hard_negatives: 16,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ContrastError::Config(msg));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tau_instance > 0.0) {
            return bad(format!("tau_instance must be positive, got {}", self.tau_instance));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return bad(format!("lambda_c must lie in [0, 1], got {}", self.lambda_c));
        }
        if !(self.lambda_s >= 0.0) || !(self.lambda_i >= 0.0) {
            return bad("lambda_s and lambda_i must be non-negative".into());
        }
        if self.hard_negatives == 0 {
            return bad("hard_negatives must be at least 1".into());
        }
        Ok(())
    }
}

/// Two-layer MLP followed by row-wise L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub mlp: Mlp,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, d: usize, d_p: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "proj", [d, d, d_p], rng),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, h: Var) -> std::result::Result<Var, TensorError> {
        let z = self.mlp.forward(tape, store, h, true, None)?;
        tape.l2_normalize(z, 1)
    }
}

/// Linear classifier `d -> C`; softmax is folded into the loss.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, d: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, "classifier", d, classes, rng),
        }
    }

    pub fn logits(&self, tape: &Tape, store: &ParamStore, h: Var) -> std::result::Result<Var, TensorError> {
        self.linear.forward(tape, store, h)
    }
}

/// Per-class prototypes, kept outside the differentiation graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCenters {
    /// `[C][d_p]`, unit rows for ready classes, zeros otherwise.
    pub centers: Vec<Vec<f64>>,
    pub ready: Vec<bool>,
    pub round: u64,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(ContrastError::Label { label, classes }),
        None => Ok(()),
    }
}

impl SemanticCenters {
    /// Normalized class means of `z` (rows). Classes absent from the batch
    /// get a zero center and stay unready.
    pub fn init(z: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        check_labels(labels, classes)?;
        let d = z.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &y) in z.iter().zip(labels) {
            counts[y] += 1;
            for (s, x) in sums[y].iter_mut().zip(row) {
                *s += x;
            }
        }
        let mut ready = vec![false; classes];
        let centers = sums
            .into_iter()
            .zip(&counts)
            .enumerate()
            .map(|(c, (s, &n))| {
                if n == 0 {
                    return s;
                }
                let mean: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
                ready[c] = mean.iter().any(|&x| x != 0.0);
                normalized(mean)
            })
            .collect();
        Ok(Self {
            centers,
            ready,
            round: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    /// Refines each present class center as a softmax(cosine)-weighted mix
    /// of that class's instances, then renormalizes. Absent classes keep
    /// their centers; an unready class present in the batch is initialized
    /// from its mean.
    pub fn update(&mut self, z: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        check_labels(labels, self.classes())?;
        for c in 0..self.classes() {
            let members: Vec<&Vec<f64>> = z
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let d = members[0].len();
            if !self.ready[c] {
                let mut mean = vec![0.0; d];
                for r in &members {
                    for (m, x) in mean.iter_mut().zip(r.iter()) {
                        *m += x / members.len() as f64;
                    }
                }
                self.ready[c] = mean.iter().any(|&x| x != 0.0);
                self.centers[c] = normalized(mean);
                continue;
            }
            let weights = softmax(
                &members
                    .iter()
                    .map(|r| cosine(r, &self.centers[c]))
                    .collect::<Vec<_>>(),
            );
            let mut w = vec![0.0; d];
            for (r, m) in members.iter().zip(&weights) {
                for (acc, x) in w.iter_mut().zip(r.iter()) {
                    *acc += m * x;
                }
            }
            self.centers[c] = normalized(w);
        }
        self.round += 1;
        Ok(())
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// A loss value plus the number of instances that could not contribute.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    /// `None` when no instance contributed.
    pub value: Option<Var>,
    pub skipped: usize,
}

/// Mean cross-entropy of `logits` `[N, C]` against `labels`.
pub fn prediction_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    check_labels(labels, shape[1])?;
    let lsm = tape.log_softmax(logits, 1)?;
    let idx: Arc<[usize]> = labels.iter().enumerate().map(|(i, &y)| i * shape[1] + y).collect();
    let picked = tape.take(lsm, idx)?;
    Ok(tape.scale(tape.mean_all(picked)?, -1.0)?)
}

/// `-(1/N) sum_i log softmax_c(z_i . w_c / tau)[y_i]` over ready classes.
/// Instances whose class is unready are skipped.
pub fn semantic_loss(
    tape: &Tape,
    z: Var,
    labels: &[usize],
    centers: &SemanticCenters,
    tau: f64,
) -> Result<LossTerm> {
    check_labels(labels, centers.classes())?;
    let ready: Vec<usize> = (0..centers.classes()).filter(|&c| centers.ready[c]).collect();
    let column = |y: usize| ready.iter().position(|&c| c == y);
    let rows: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| column(y).map(|k| (i, k)))
        .collect();
    let skipped = labels.len() - rows.len();
    if rows.is_empty() {
        return Ok(LossTerm { value: None, skipped });
    }
    let d = tape.shape(z)[1];
    let w: Vec<f64> = ready.iter().flat_map(|&c| centers.centers[c].iter().copied()).collect();
    let w = tape.constant(Tensor::new(vec![ready.len(), d], w)?)?;
    let logits = tape.scale(tape.matmul(z, tape.transpose(w)?)?, 1.0 / tau)?;
    let lsm = tape.log_softmax(logits, 1)?;
    let idx: Arc<[usize]> = rows.iter().map(|&(i, k)| i * ready.len() + k).collect();
    let picked = tape.take(lsm, idx)?;
    let value = tape.scale(tape.mean_all(picked)?, -1.0)?;
    Ok(LossTerm {
        value: Some(value),
        skipped,
    })
}

/// `normalize(lambda_c z + (1 - lambda_c) w_y)` row-wise. Rows whose class
/// is unready are only renormalized.
pub fn instance_constraint(
    tape: &Tape,
    z: Var,
    labels: &[usize],
    centers: &SemanticCenters,
    lambda_c: f64,
) -> Result<Var> {
    check_labels(labels, centers.classes())?;
    let d = tape.shape(z)[1];
    let mut keep = Vec::with_capacity(labels.len());
    let mut pull = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        if centers.ready[y] {
            keep.push(lambda_c);
            pull.extend(centers.centers[y].iter().map(|x| (1.0 - lambda_c) * x));
        } else {
            keep.push(1.0);
            pull.extend(std::iter::repeat(0.0).take(d));
        }
    }
    let keep = tape.constant(Tensor::new(vec![labels.len(), 1], keep)?)?;
    let pull = tape.constant(Tensor::new(vec![labels.len(), d], pull)?)?;
    let mixed = tape.add(tape.mul(z, keep)?, pull)?;
    Ok(tape.l2_normalize(mixed, 1)?)
}

/// For each class, the batch indices of at most `k` other-class rows of
/// `z_prime` nearest its center under cosine distance, nearest first, ties
/// broken by lower index. Unready classes get an empty list.
pub fn hard_negatives(
    z_prime: &[Vec<f64>],
    labels: &[usize],
    centers: &SemanticCenters,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    check_labels(labels, centers.classes())?;
    Ok((0..centers.classes())
        .map(|c| {
            if !centers.ready[c] {
                return Vec::new();
            }
            let mut cand: Vec<(f64, usize)> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y != c)
                .map(|(j, _)| (1.0 - cosine(&centers.centers[c], &z_prime[j]), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// One positive partner per instance, drawn uniformly from the other
/// members of its class; `None` for instances alone in their class.
pub fn sample_positives(labels: &[usize], rng: &mut impl Rng) -> Vec<Option<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let group = &members[y];
            if group.len() < 2 {
                return None;
            }
            let r = rng.gen_range(0..group.len() - 1);
            let pick = group[r];
            Some(if pick == i { group[group.len() - 1] } else { pick })
        })
        .collect()
}

/// `-(1/N) sum_i log [e^{z'_i.z'_+/tau'} / (e^{z'_i.z'_+/tau'} + sum_k e^{z'_i.z'_k/tau'})]`
/// with negatives taken from the instance's class list. Instances lacking
/// a positive or any negative are skipped.
pub fn instance_loss(
    tape: &Tape,
    z_prime: Var,
    labels: &[usize],
    positives: &[Option<usize>],
    negatives: &[Vec<usize>],
    tau_instance: f64,
) -> Result<LossTerm> {
    let n = labels.len();
    let mut skipped = 0;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); negatives.len()];
    for (i, &y) in labels.iter().enumerate() {
        let negs = negatives.get(y).ok_or(ContrastError::Label {
            label: y,
            classes: negatives.len(),
        })?;
        if positives[i].is_none() || negs.is_empty() {
            skipped += 1;
        } else {
            groups[y].push(i);
        }
    }
    let contributing: usize = groups.iter().map(Vec::len).sum();
    if contributing == 0 {
        return Ok(LossTerm { value: None, skipped });
    }
    let sims = tape.matmul(z_prime, tape.transpose(z_prime)?)?;
    let sims = tape.scale(sims, 1.0 / tau_instance)?;
    let mut total: Option<Var> = None;
    for (c, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let negs = &negatives[c];
        let width = 1 + negs.len();
        let mut idx = Vec::with_capacity(members.len() * width);
        for &i in members {
            idx.push(i * n + positives[i].expect("filtered above"));
            idx.extend(negs.iter().map(|&j| i * n + j));
        }
        let block = tape.reshape(tape.take(sims, idx.into())?, vec![members.len(), width])?;
        let lsm = tape.log_softmax(block, 1)?;
        let first: Arc<[usize]> = (0..members.len()).map(|r| r * width).collect();
        let s = tape.sum_all(tape.take(lsm, first)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let value = tape.scale(total.expect("at least one group"), -1.0 / contributing as f64)?;
    Ok(LossTerm {
        value: Some(value),
        skipped,
    })
}

/// `L_pred + lambda_s L_sem + lambda_i L_ins`; absent terms contribute 0.
pub fn total_loss(
    tape: &Tape,
    pred: Var,
    sem: Option<Var>,
    ins: Option<Var>,
    lambda_s: f64,
    lambda_i: f64,
) -> Result<Var> {
    let mut total = pred;
    for (term, weight) in [(sem, lambda_s), (ins, lambda_i)] {
        if let Some(t) = term {
            if weight != 0.0 {
                total = tape.add(total, tape.scale(t, weight)?)?;
            }
        }
    }
    Ok(total)
}

/// Rows of a `[N, d]` tape value as vectors.
pub fn rows_of(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let t = tape.value(v);
    let cols = t.cols();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}
