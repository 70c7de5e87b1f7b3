mod common;

use common::oracle::{self, sigmoid};
use common::{max_abs_diff, random_graph};
use iglab::encoder::{readout, Backbone, Encoder, EncoderConfig, ForwardOptions, GinLayer, Linear};
use iglab::graph::{make_batch, Graph};
use iglab::tensor::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(d_in: usize, d: usize, layers: usize, backbone: Backbone, seed: u64) -> (Encoder, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        input_dim: d_in,
        emb_dim: d,
        layers,
        dropout: 0.0,
        backbone,
    };
    let enc = Encoder::new(cfg, &mut store, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = rng.gen_range(-0.6..0.6);
        }
    }
    (enc, store)
}

struct Out {
    graph: Vec<Vec<f64>>,
    nodes: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn encode(enc: &Encoder, store: &ParamStore, graphs: &[&Graph]) -> Out {
    let tape = Tape::inference();
    let batch = make_batch(graphs).unwrap();
    let e = enc.forward(&tape, store, &batch, &mut ForwardOptions::eval()).unwrap();
    let d = tape.shape(e.graph_emb)[1];
    Out {
        graph: tape.data(e.graph_emb).chunks(d).map(<[f64]>::to_vec).collect(),
        nodes: tape.data(e.node_emb),
        alpha: tape.data(e.node_scores.unwrap()),
        beta: e.edge_scores.map(|v| tape.data(v)).unwrap_or_default(),
    }
}

fn graph(features: Vec<Vec<f64>>, edges: Vec<(usize, usize)>) -> Graph {
    Graph {
        num_nodes: features.len(),
        features,
        edges,
        label: 0,
        env_id: "e".into(),
        invariance_mask: None,
    }
}

fn identity_gin(store: &mut ParamStore, d: usize) -> GinLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gin = GinLayer::new(store, "g", d, d, &mut rng);
    for lin in [&gin.mlp.first, &gin.mlp.second] {
        let w = store.get_mut(lin.weight).data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
    }
    gin
}

fn gin_once(gin: &GinLayer, store: &ParamStore, g: &Graph) -> Vec<f64> {
    let tape = Tape::inference();
    let batch = make_batch(&[g]).unwrap();
    let x = tape.constant(Tensor::from_rows(&g.features)).unwrap();
    let h = gin.forward(&tape, store, x, &batch, false, None).unwrap();
    tape.data(h)
}

#[test]
fn gin_identity_cases() {
    let mut store = ParamStore::new();
    let gin = identity_gin(&mut store, 2);
    let alone = graph(vec![vec![0.3, -1.2]], vec![]);
    assert_eq!(gin_once(&gin, &store, &alone), vec![0.3, -1.2]);
    let pair = graph(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![(0, 1), (1, 0)]);
    assert_eq!(gin_once(&gin, &store, &pair), vec![1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn gin_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..20 {
        let (enc, store) = build(4, 5, 3, Backbone::Gin, seed);
        let g = random_graph(&mut rng, 6, 4, 4, 0);
        let out = encode(&enc, &store, &[&g]);
        let want: Vec<f64> = oracle::gin_nodes(&enc, &store, &g).concat();
        assert!(max_abs_diff(&out.nodes, &want) <= 1e-10);
    }
}

#[test]
fn node_attention_cases() {
    let (enc, store) = build(3, 3, 1, Backbone::Gin, 7);
    let tape = Tape::inference();
    let single = graph(vec![vec![0.2, -0.4, 0.9]], vec![]);
    let batch = make_batch(&[&single]).unwrap();
    let h = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]])).unwrap();
    let a = tape.data(enc.node_attention.attended(&tape, &store, h, &batch).unwrap());
    let v = tape.data(tape.matmul(h, tape.param(&store, enc.node_attention.wv)).unwrap());
    assert!(max_abs_diff(&a, &v) <= 1e-15);

    let same = graph(vec![vec![1.0, 0.0, 0.0]; 4], vec![]);
    let out = encode(&enc, &store, &[&same]);
    assert!(out.alpha.iter().all(|&x| (x - out.alpha[0]).abs() <= 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let (enc, store) = build(3, 4, 2, Backbone::Gin, 100 + seed);
        let g = random_graph(&mut rng, 3, 3, 1, 0);
        let out = encode(&enc, &store, &[&g]);
        let h = oracle::gin_nodes(&enc, &store, &g);
        let want = oracle::node_scores(&enc, &store, &h);
        assert!(max_abs_diff(&out.alpha, &want) <= 1e-10);
    }
}

#[test]
fn edge_attention_cases() {
    let (enc, store) = build(2, 3, 2, Backbone::Gin, 3);
    let one = graph(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![(0, 1)]);
    let out = encode(&enc, &store, &[&one]);
    assert!((out.beta[0] - sigmoid(1.0)).abs() <= 1e-15);
    assert!((out.beta[0] - 0.7311).abs() < 5e-5);

    let twin = graph(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![(0, 2), (1, 2)]);
    let out = encode(&enc, &store, &[&twin]);
    assert_eq!(out.beta[0], out.beta[1]);
    assert!((out.beta[0] - sigmoid(1.0)).abs() <= 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let (enc, store) = build(3, 4, 2, Backbone::Gin, 200 + seed);
        let feats = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let star = graph(feats, vec![(1, 0), (2, 0), (3, 0), (4, 0)]);
        let out = encode(&enc, &store, &[&star]);
        let h = oracle::gin_nodes(&enc, &store, &star);
        let want = oracle::edge_scores(&enc, &store, &h, &star.edges);
        assert!(max_abs_diff(&out.beta, &want) <= 1e-10);
    }
}

fn identity_readout(store: &mut ParamStore, d: usize) -> Linear {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(store, "ro", 2 * d, 2 * d, &mut rng);
    let w = store.get_mut(lin.weight).data_mut();
    w.fill(0.0);
    for i in 0..2 * d {
        w[i * 2 * d + i] = 1.0;
    }
    lin
}

#[test]
fn readout_degenerate_cases() {
    let mut store = ParamStore::new();
    let lin = identity_readout(&mut store, 2);
    let pair = graph(vec![vec![1.0, 2.0], vec![3.0, -4.0]], vec![(0, 1), (1, 0)]);
    let batch = make_batch(&[&pair]).unwrap();
    let tape = Tape::inference();
    let h = tape.constant(Tensor::from_rows(&pair.features)).unwrap();
    let ends = (
        tape.gather_rows(h, batch.src.clone()).unwrap(),
        tape.gather_rows(h, batch.dst.clone()).unwrap(),
    );
    let g = readout(&tape, &store, &lin, h, None, Some(ends), None, &batch).unwrap();
    assert_eq!(tape.data(g), vec![2.0, -1.0, 2.0, -1.0]);

    let zeros = tape.constant(Tensor::zeros(vec![2, 1])).unwrap();
    let g = readout(&tape, &store, &lin, h, Some(zeros), Some(ends), None, &batch).unwrap();
    assert_eq!(&tape.data(g)[..2], &[0.0, 0.0]);

    let single = graph(vec![vec![0.5, 0.25]], vec![]);
    let batch = make_batch(&[&single]).unwrap();
    let h = tape.constant(Tensor::from_rows(&single.features)).unwrap();
    let g = readout(&tape, &store, &lin, h, None, None, None, &batch).unwrap();
    assert_eq!(tape.data(g), vec![0.5, 0.25, 0.0, 0.0]);
}

#[test]
fn full_forward_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let (enc, store) = build(4, 4, 2, Backbone::Gin, 300 + seed);
        let n = rng.gen_range(2..8);
        let g = random_graph(&mut rng, n, 4, 3, 0);
        let out = encode(&enc, &store, &[&g]);
        let want = oracle::forward(&enc, &store, &g);
        assert!(max_abs_diff(&out.graph[0], &want.graph) <= 1e-10);
        assert!(max_abs_diff(&out.alpha, &want.alpha) <= 1e-10);
        assert!(max_abs_diff(&out.beta, &want.beta) <= 1e-10);
    }
}

#[test]
fn edgeless_graph_uses_node_term_only() {
    let (enc, store) = build(2, 3, 2, Backbone::Gin, 9);
    let g = graph(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![]);
    let out = encode(&enc, &store, &[&g]);
    assert!(out.beta.is_empty());
    let want = oracle::readout(&enc, &store, &oracle::gin_nodes(&enc, &store, &g), &out.alpha, &[], &[]);
    assert!(max_abs_diff(&out.graph[0], &want) <= 1e-12);
}

#[test]
fn permutation_invariance_all_backbones() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for backbone in [Backbone::Gin, Backbone::Gcn, Backbone::Gat] {
        let (enc, store) = build(4, 6, 3, backbone, 8);
        for _ in 0..10 {
            let n = rng.gen_range(2..15);
            let g = random_graph(&mut rng, n, 4, 6, 0);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = encode(&enc, &store, &[&g]).graph.remove(0);
            let b = encode(&enc, &store, &[&g.permuted(&perm)]).graph.remove(0);
            assert!(max_abs_diff(&a, &b) <= 1e-9, "{backbone:?}");
        }
    }
}

#[test]
fn batch_independence_and_shuffle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for backbone in [Backbone::Gin, Backbone::Gcn, Backbone::Gat] {
        let (enc, store) = build(3, 5, 3, backbone, 11);
        let graphs: Vec<Graph> = (0..12)
            .map(|i| {
                let n = rng.gen_range(1..10);
                let mut g = random_graph(&mut rng, n, 3, 3, 0);
                if i % 5 == 0 {
                    g.edges.clear();
                }
                g
            })
            .collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        let together = encode(&enc, &store, &refs);
        for (i, g) in graphs.iter().enumerate() {
            let alone = encode(&enc, &store, &[g]);
            assert!(max_abs_diff(&together.graph[i], &alone.graph[0]) <= 1e-10, "{backbone:?} graph {i}");
        }
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<&Graph> = order.iter().map(|&i| &graphs[i]).collect();
        let out = encode(&enc, &store, &shuffled);
        for (k, &i) in order.iter().enumerate() {
            assert!(max_abs_diff(&out.graph[k], &together.graph[i]) <= 1e-10);
        }
    }
}

#[test]
fn scores_lie_strictly_inside_unit_interval() {
    let data = iglab::motif::generate(&iglab::motif::GenConfig::covariate_size(3, [40, 10, 10])).unwrap();
    let (enc, store) = build(8, 8, 3, Backbone::Gin, 12);
    let refs: Vec<&Graph> = data.train.iter().chain(&data.test).collect();
    let out = encode(&enc, &store, &refs);
    assert!(out.alpha.iter().chain(&out.beta).all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn graph_embedding_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let graphs: Vec<Graph> = (0..2).map(|_| random_graph(&mut rng, 5, 3, 2, 0)).collect();
    let refs: Vec<&Graph> = graphs.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let (enc, mut store) = build(3, 3, 2, Backbone::Gin, 14);
    let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |tape: &Tape, store: &ParamStore| {
        let e = enc.forward(tape, store, &batch, &mut ForwardOptions::eval()).unwrap();
        let w = tape.constant(Tensor::new(vec![2, 3], weights.clone()).unwrap()).unwrap();
        tape.sum_all(tape.mul(e.graph_emb, w).unwrap()).unwrap()
    };
    store.zero_grad();
    let tape = Tape::new();
    let l = loss(&tape, &store);
    tape.backward_into(l, &mut store).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.get(id).grad().unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = store.get(id).data()[j];
            let mut at = |x: f64| {
                store.get_mut(id).data_mut()[j] = x;
                let t = Tape::inference();
                let l = loss(&t, &store);
                t.item(l)
            };
            let (p, m) = (at(x0 + h), at(x0 - h));
            store.get_mut(id).data_mut()[j] = x0;
            *slot = (p - m) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff <= 1e-4 * scale.max(1e-6), "{}: {diff:e} vs {scale:e}", store.name(id));
    }
}
