//! Synthetic motif benchmark.
//!
//! Each graph joins one label-determining motif to one base graph by a
//! single bridging edge. Base graphs carry the distribution shift: their
//! size differs across splits (covariate shift), or their type is correlated
//! with the label in training only (concept shift).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DatasetMeta, DatasetSplit, Graph, ShiftKind, SplitIds};

pub const HOUSE_NODES: usize = 5;
pub const CRANE_NODES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{kind:?} base graph needs {need}, got n = {n}")]
    BaseSize {
        kind: BaseKind,
        n: usize,
        need: &'static str,
    },
}

/// Label-determining motif; the discriminant is the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotifKind {
    House = 0,
    Cycle = 1,
    Crane = 2,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle, MotifKind::Crane];

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    /// Undirected edge list (each edge once) and node count.
    ///
    /// - house: 4-cycle `0-1-2-3` with roof apex `4` joined to `0` and `1`
    /// - cycle: ring of `cycle_len` nodes
    /// - crane: triangle `0-1-2` with tail `2-3-4`
    pub fn template(self, cycle_len: usize) -> (usize, Vec<(usize, usize)>) {
        match self {
            MotifKind::House => (
                HOUSE_NODES,
                vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            ),
            MotifKind::Cycle => (
                cycle_len,
                (0..cycle_len).map(|i| (i, (i + 1) % cycle_len)).collect(),
            ),
            MotifKind::Crane => (CRANE_NODES, vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseKind {
    Wheel,
    Tree,
    Ladder,
    Star,
    Path,
}

impl BaseKind {
    pub const ALL: [BaseKind; 5] = [
        BaseKind::Wheel,
        BaseKind::Tree,
        BaseKind::Ladder,
        BaseKind::Star,
        BaseKind::Path,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Wheel => "wheel",
            BaseKind::Tree => "tree",
            BaseKind::Ladder => "ladder",
            BaseKind::Star => "star",
            BaseKind::Path => "path",
        }
    }

    pub fn min_nodes(self) -> usize {
        match self {
            BaseKind::Wheel | BaseKind::Ladder => 4,
            BaseKind::Tree | BaseKind::Star | BaseKind::Path => 2,
        }
    }
}

/// Undirected base graph on nodes `0..n`, each edge listed once.
pub fn base_graph(kind: BaseKind, n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>, GenError> {
    let bad = |need| Err(GenError::BaseSize { kind, n, need });
    if n < kind.min_nodes() {
        return bad(match kind {
            BaseKind::Wheel | BaseKind::Ladder => "n >= 4",
            _ => "n >= 2",
        });
    }
    Ok(match kind {
        BaseKind::Wheel => {
            let rim = n - 1;
            let mut e: Vec<_> = (1..n).map(|i| (0, i)).collect();
            e.extend((0..rim).map(|i| (1 + i, 1 + (i + 1) % rim)));
            e
        }
        BaseKind::Tree => (1..n).map(|i| (rng.gen_range(0..i), i)).collect(),
        BaseKind::Ladder => {
            if n % 2 != 0 {
                return bad("an even n >= 4");
            }
            let k = n / 2;
            let mut e = Vec::with_capacity(3 * k - 2);
            for i in 0..k - 1 {
                e.push((i, i + 1));
                e.push((k + i, k + i + 1));
            }
            e.extend((0..k).map(|i| (i, k + i)));
            e
        }
        BaseKind::Star => (1..n).map(|i| (0, i)).collect(),
        BaseKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub shift: ShiftKind,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Inclusive base node-count ranges.
    pub train_sizes: [usize; 2],
    pub val_sizes: [usize; 2],
    pub test_sizes: [usize; 2],
    /// Probability that a training graph uses its label's correlated base
    /// (concept shift only).
    #[serde(default = "default_p_train")]
    pub p_train: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_cycle_len")]
    pub cycle_len: usize,
}

fn default_p_train() -> f64 {
    0.9
}
fn default_feature_dim() -> usize {
    8
}
fn default_cycle_len() -> usize {
    6
}

impl GenConfig {
    /// Motif-size style covariate config: small bases in training, large at test.
    pub fn covariate_size(seed: u64, counts: [usize; 3]) -> Self {
        Self {
            shift: ShiftKind::CovariateSize,
            seed,
            train_count: counts[0],
            val_count: counts[1],
            test_count: counts[2],
            train_sizes: [10, 30],
            val_sizes: [35, 55],
            test_sizes: [60, 90],
            p_train: default_p_train(),
            feature_dim: default_feature_dim(),
            cycle_len: default_cycle_len(),
        }
    }

    pub fn concept_base(seed: u64, counts: [usize; 3], p_train: f64) -> Self {
        Self {
            shift: ShiftKind::ConceptBase,
            train_sizes: [10, 30],
            val_sizes: [10, 30],
            test_sizes: [10, 30],
            p_train,
            ..Self::covariate_size(seed, counts)
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let err = |field, reason: String| Err(GenError::Config { field, reason });
        for (field, [lo, hi]) in [
            ("train_sizes", self.train_sizes),
            ("val_sizes", self.val_sizes),
            ("test_sizes", self.test_sizes),
        ] {
            if lo > hi {
                return err(field, format!("empty range [{lo}, {hi}]"));
            }
            let need = BaseKind::ALL.iter().map(|k| k.min_nodes()).max().unwrap();
            if lo < need {
                return err(field, format!("lower bound {lo} below smallest base size {need}"));
            }
            if lo == hi && lo % 2 == 1 {
                return err(field, format!("range [{lo}, {hi}] admits no ladder (needs even size)"));
            }
        }
        if self.shift == ShiftKind::CovariateSize && self.test_sizes[0] <= self.train_sizes[1] {
            return err(
                "test_sizes",
                format!(
                    "covariate-size test range {:?} must lie above train range {:?}",
                    self.test_sizes, self.train_sizes
                ),
            );
        }
        let uniform = 1.0 / BaseKind::ALL.len() as f64;
        if !(self.p_train > uniform && self.p_train <= 1.0) {
            return err("p_train", format!("{} outside ({uniform}, 1]", self.p_train));
        }
        if self.feature_dim < 2 {
            return err("feature_dim", "must be at least 2".into());
        }
        if self.cycle_len < 3 {
            return err("cycle_len", "must be at least 3".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        MotifKind::ALL.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Train,
    Val,
    Test,
}

/// Environment tag for a base of `n` nodes drawn from the inclusive `range`:
/// the range is cut into three equal-width bands.
pub fn size_band(n: usize, range: [usize; 2]) -> String {
    let [lo, hi] = range;
    let width = (hi - lo + 1).div_ceil(3);
    let band = (n - lo) / width;
    let start = lo + band * width;
    let end = (start + width - 1).min(hi);
    format!("size-{start}-{end}")
}

/// Builds the full split. Graph `i` (counting train, then val, then test)
/// draws from its own ChaCha stream `i` under `config.seed`, so each graph
/// is a pure function of `(seed, i)`.
pub fn generate(config: &GenConfig) -> Result<DatasetSplit, GenError> {
    config.validate()?;
    let mut next = 0u64;
    let mut part = |p: Part, count: usize| {
        let ids: Vec<u64> = (next..next + count as u64).collect();
        next += count as u64;
        let graphs = ids
            .iter()
            .map(|&i| generate_graph(config, p, i))
            .collect::<Result<Vec<_>, _>>();
        graphs.map(|g| (g, ids))
    };
    let (train, train_ids) = part(Part::Train, config.train_count)?;
    let (val, val_ids) = part(Part::Val, config.val_count)?;
    let (test, test_ids) = part(Part::Test, config.test_count)?;
    Ok(DatasetSplit {
        meta: DatasetMeta {
            shift: config.shift,
            seed: config.seed,
            classes: config.num_classes(),
            feature_dim: config.feature_dim,
            ids: SplitIds {
                train: train_ids,
                val: val_ids,
                test: test_ids,
            },
        },
        train,
        val,
        test,
    })
}

fn generate_graph(config: &GenConfig, part: Part, index: u64) -> Result<Graph, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    let label = rng.gen_range(0..config.num_classes());
    let motif = MotifKind::ALL[label];
    let base = match (config.shift, part) {
        (ShiftKind::ConceptBase, Part::Train) => {
            let correlated = BaseKind::ALL[label];
            if rng.gen_bool(config.p_train) {
                correlated
            } else {
                let others: Vec<_> = BaseKind::ALL.iter().filter(|&&k| k != correlated).collect();
                **others.choose(&mut rng).expect("four other bases")
            }
        }
        _ => *BaseKind::ALL.choose(&mut rng).expect("nonempty"),
    };
    let range = match part {
        Part::Train => config.train_sizes,
        Part::Val => config.val_sizes,
        Part::Test => config.test_sizes,
    };
    let mut n_base = rng.gen_range(range[0]..=range[1]);
    if base == BaseKind::Ladder && n_base % 2 == 1 {
        n_base = if n_base > range[0] { n_base - 1 } else { n_base + 1 };
    }
    let mut undirected = base_graph(base, n_base, &mut rng)?;
    let (n_motif, motif_edges) = motif.template(config.cycle_len);
    undirected.extend(motif_edges.iter().map(|&(u, v)| (u + n_base, v + n_base)));
    let bridge_base = rng.gen_range(0..n_base);
    let bridge_motif = rng.gen_range(0..n_motif);
    undirected.push((bridge_base, n_base + bridge_motif));

    let n = n_base + n_motif;
    let mut degree = vec![0usize; n];
    for &(u, v) in &undirected {
        degree[u] += 1;
        degree[v] += 1;
    }
    let d = config.feature_dim;
    let features = degree
        .iter()
        .map(|&k| {
            let mut row = vec![0.0; d];
            row[k.min(d - 1)] = 1.0;
            row
        })
        .collect();
    let edges = undirected.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
    let env_id = match config.shift {
        ShiftKind::CovariateSize => size_band(n_base, range),
        ShiftKind::ConceptBase => base.name().to_string(),
    };
    let mut mask = vec![false; n_base];
    mask.resize(n, true);
    Ok(Graph {
        num_nodes: n,
        features,
        edges,
        label,
        env_id,
        invariance_mask: Some(mask),
    })
}
