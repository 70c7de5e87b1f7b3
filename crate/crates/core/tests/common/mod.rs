#![allow(dead_code)]

pub mod oracle;

use iglab::graph::Graph;
use iglab::tensor::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|, floor)` between the
/// tape gradient and a central difference with step `h`, maximized over
/// all inputs.
pub fn grad_check(inputs: &[Tensor], h: f64, f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad()).unwrap()).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let tape = Tape::inference();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let l = f(&tape, &vars).unwrap();
        tape.item(l)
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-7));
    }
    worst
}

/// Connected random graph (spanning tree plus extra edges), both directions
/// stored, random dense features.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, extra: usize, label: usize) -> Graph {
    let mut und = Vec::new();
    for v in 1..n {
        und.push((rng.gen_range(0..v), v));
    }
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !und.contains(&(a.min(b), a.max(b))) {
            und.push((a.min(b), a.max(b)));
        }
    }
    let mut edges = Vec::new();
    for (a, b) in und {
        edges.push((a, b));
        edges.push((b, a));
    }
    Graph {
        num_nodes: n,
        features: (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        edges,
        label,
        env_id: "e0".into(),
        invariance_mask: Some((0..n).map(|_| rng.gen_bool(0.3)).collect()),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `K` pairs `(x, y)` with `y = rho x + sqrt(1 - rho^2) e`, all standard normal in `dim`.
pub fn correlated_gaussians(rng: &mut ChaCha8Rng, k: usize, dim: usize, rho: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use rand_distr::StandardNormal;
    let s = (1.0 - rho * rho).sqrt();
    let x: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let y = x
        .iter()
        .map(|r| r.iter().map(|&a| rho * a + s * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    (x, y)
}

/// Analytic mutual information of `dim` independent coordinate pairs with correlation `rho`.
pub fn gaussian_mi(dim: usize, rho: f64) -> f64 {
    -(dim as f64 / 2.0) * (1.0 - rho * rho).ln()
}
