//! Training loop: batching, the forward pipeline through all losses, Adam
//! updates under a cosine schedule, checkpoints, and ablation modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contrast::{
    hard_negatives, instance_constraint, instance_loss, prediction_loss, rows_of, sample_positives,
    semantic_loss, total_loss, ContrastConfig, ContrastError, SemanticCenters,
};
use crate::encoder::{Backbone, ForwardOptions};
use crate::eval::{evaluate, SplitReport};
use crate::graph::{make_batch, DatasetSplit, Graph, GraphError};
use crate::model::{Model, ModelError, ModelSpec, NamedTensor};
use crate::tensor::{Adam, AdamConfig, AdamState, Tape, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("unknown ablation mode `{0}` (expected full, R, C, S, I or N)")]
    UnknownMode(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
        /// State at the end of the last completed epoch.
        last: Box<Checkpoint>,
    },
    #[error("checkpoint does not match: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_clip() -> f64 {
    5.0
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub emb_dim: usize,
    pub max_epoch: usize,
    pub batch_size: usize,
    pub ini_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub seed: u64,
    #[serde(default)]
    pub backbone: Backbone,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.emb_dim == 0 {
            return bad("emb_dim must be at least 1");
        }
        if self.max_epoch == 0 {
            return bad("max_epoch must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.ini_lr > 0.0) || !(self.min_lr > 0.0) {
            return bad("ini_lr and min_lr must be positive");
        }
        if self.min_lr > self.ini_lr {
            return bad("min_lr must not exceed ini_lr");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Cosine decay from `ini_lr` at epoch 0 to `min_lr` at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.max_epoch <= 1 {
            return self.ini_lr;
        }
        let t = epoch as f64 / (self.max_epoch - 1) as f64;
        self.min_lr + 0.5 * (self.ini_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    Full,
    R,
    C,
    S,
    I,
    N,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Full, Mode::R, Mode::C, Mode::S, Mode::I, Mode::N];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::R => "R",
            Mode::C => "C",
            Mode::S => "S",
            Mode::I => "I",
            Mode::N => "N",
        }
    }

    /// The effective pipeline: loss weights plus whether the filter runs.
    pub fn pipeline(self, contrast: &ContrastConfig) -> Pipeline {
        let mut c = contrast.clone();
        let mut filter = true;
        match self {
            Mode::Full => {}
            Mode::R | Mode::N => {
                c.lambda_s = 0.0;
                c.lambda_i = 0.0;
            }
            Mode::C => filter = false,
            Mode::S => c.lambda_i = 0.0,
            Mode::I => c.lambda_s = 0.0,
        }
        Pipeline { contrast: c, filter }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TrainError::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub contrast: ContrastConfig,
    pub filter: bool,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub contrast: ContrastConfig,
    pub mode: Mode,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub spec: ModelSpec,
    pub params: Vec<NamedTensor>,
    pub adam: AdamState,
    pub centers: Option<SemanticCenters>,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn model(&self) -> Result<Model> {
        // Layout only; values are overwritten below.
        let mut model = Model::new(self.spec.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        model.import_params(&self.params)?;
        Ok(model)
    }
}

/// Loss components of one step (or their epoch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_pred: f64,
    pub loss_sem: f64,
    pub loss_ins: f64,
    pub skipped_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub stats: StepStats,
    pub val_metric: f64,
    pub test_metric: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss_total,loss_pred,loss_sem,loss_ins,val_metric,test_metric,skipped_instances";

    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            s.loss_total,
            s.loss_pred,
            s.loss_sem,
            s.loss_ins,
            self.val_metric,
            self.test_metric,
            s.skipped_instances
        )
    }
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(EpochRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub struct Trainer<'d> {
    pub model: Model,
    pub adam: AdamState,
    pub centers: Option<SemanticCenters>,
    pub rng: ChaCha8Rng,
    pub config: RunConfig,
    pub pipeline: Pipeline,
    pub epoch: usize,
    pub best_val: Option<f64>,
    /// Number of times the instance-level loss was evaluated.
    pub instance_loss_calls: u64,
    data: &'d DatasetSplit,
}

/// Result of [`Trainer::run`].
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub best_epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d DatasetSplit, config: RunConfig) -> Result<Self> {
        config.train.validate()?;
        config.contrast.validate()?;
        if data.train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let t = &config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let spec = ModelSpec {
            input_dim: data.meta.feature_dim,
            classes: data.meta.classes,
            emb_dim: t.emb_dim,
            layers: t.layers,
            dropout: t.dropout,
            backbone: t.backbone,
        };
        let model = Model::new(spec, &mut rng);
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: t.ini_lr,
                weight_decay: t.weight_decay,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            pipeline: config.mode.pipeline(&config.contrast),
            model,
            adam,
            centers: None,
            rng,
            config,
            epoch: 0,
            best_val: None,
            instance_loss_calls: 0,
            data,
        })
    }

    pub fn from_checkpoint(data: &'d DatasetSplit, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(TrainError::Checkpoint("config hash mismatch".into()));
        }
        if ckpt.spec.input_dim != data.meta.feature_dim || ckpt.spec.classes != data.meta.classes {
            return Err(TrainError::Checkpoint("model shape does not fit dataset".into()));
        }
        Ok(Self {
            model: ckpt.model()?,
            adam: ckpt.adam.clone(),
            centers: ckpt.centers.clone(),
            rng: ckpt.rng.clone(),
            pipeline: ckpt.config.mode.pipeline(&ckpt.config.contrast),
            config: ckpt.config.clone(),
            epoch: ckpt.epoch,
            best_val: ckpt.best_val,
            instance_loss_calls: 0,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            spec: self.model.spec.clone(),
            params: self.model.export_params(),
            adam: self.adam.clone(),
            centers: self.centers.clone(),
            rng: self.rng.clone(),
            best_val: self.best_val,
        }
    }

    /// One optimization step on `graphs`. `fresh_centers` re-initializes
    /// the semantic centers from this batch instead of refining them.
    pub fn step(&mut self, graphs: &[&Graph], fresh_centers: bool) -> Result<StepStats> {
        let batch = make_batch(graphs)?;
        let labels = &batch.labels;
        let classes = self.model.spec.classes;
        let c = self.pipeline.contrast.clone();
        let tape = Tape::new();
        let m = &self.model;
        let enc = m.encoder.forward(&tape, &m.store, &batch, &mut ForwardOptions {
            filter: self.pipeline.filter,
            dropout_rng: Some(&mut self.rng),
        })?;
        let logits = m.classifier.logits(&tape, &m.store, enc.graph_emb)?;
        let pred = prediction_loss(&tape, logits, labels)?;
        let mut stats = StepStats {
            loss_pred: tape.item(pred),
            ..Default::default()
        };
        let (mut sem, mut ins) = (None, None);
        if c.lambda_s > 0.0 || c.lambda_i > 0.0 {
            let z = m.projection.forward(&tape, &m.store, enc.graph_emb)?;
            let z_rows = rows_of(&tape, z);
            match (&mut self.centers, fresh_centers) {
                (Some(centers), false) => centers.update(&z_rows, labels)?,
                (slot, _) => *slot = Some(SemanticCenters::init(&z_rows, labels, classes)?),
            }
            let centers = self.centers.as_ref().expect("set above");
            if c.lambda_s > 0.0 {
                let term = semantic_loss(&tape, z, labels, centers, c.tau)?;
                stats.skipped_instances += term.skipped;
                stats.loss_sem = term.value.map_or(0.0, |v| tape.item(v));
                sem = term.value;
            }
            if c.lambda_i > 0.0 {
                let zp = instance_constraint(&tape, z, labels, centers, c.lambda_c)?;
                let negs = hard_negatives(&rows_of(&tape, zp), labels, centers, c.hard_negatives)?;
                let pos = sample_positives(labels, &mut self.rng);
                let term = instance_loss(&tape, zp, labels, &pos, &negs, c.tau_instance)?;
                self.instance_loss_calls += 1;
                stats.skipped_instances += term.skipped;
                stats.loss_ins = term.value.map_or(0.0, |v| tape.item(v));
                ins = term.value;
            }
        }
        let total = total_loss(&tape, pred, sem, ins, c.lambda_s, c.lambda_i)?;
        stats.loss_total = tape.item(total);
        let store = &mut self.model.store;
        store.zero_grad();
        tape.backward_into(total, store)?;
        if self.config.train.grad_clip > 0.0 {
            let norm = store.clip_grad_norm(self.config.train.grad_clip);
            if !norm.is_finite() {
                return Err(TensorError::NonFinite { op: "gradient norm" }.into());
            }
        }
        Adam::step(store, &mut self.adam)?;
        Ok(stats)
    }

    /// Shuffles the training split and runs one pass over it. Returns mean
    /// loss components over batches and the summed skip count.
    pub fn train_epoch(&mut self) -> Result<StepStats> {
        let last = self.checkpoint();
        let lr = self.config.train.lr_at(self.epoch);
        self.adam.set_lr(lr);
        let data = self.data;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepStats::default();
        let mut batches = 0usize;
        for (k, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &data.train[i]).collect();
            let s = match self.step(&graphs, k == 0) {
                Ok(s) if s.loss_total.is_finite() => s,
                Ok(_) => return Err(self.diverged(k, "non-finite loss".into(), last)),
                Err(TrainError::Tensor(e @ TensorError::NonFinite { .. })) => {
                    return Err(self.diverged(k, e.to_string(), last))
                }
                Err(e) => return Err(e),
            };
            sum.loss_total += s.loss_total;
            sum.loss_pred += s.loss_pred;
            sum.loss_sem += s.loss_sem;
            sum.loss_ins += s.loss_ins;
            sum.skipped_instances += s.skipped_instances;
            batches += 1;
        }
        let b = batches as f64;
        self.epoch += 1;
        Ok(StepStats {
            loss_total: sum.loss_total / b,
            loss_pred: sum.loss_pred / b,
            loss_sem: sum.loss_sem / b,
            loss_ins: sum.loss_ins / b,
            skipped_instances: sum.skipped_instances,
        })
    }

    fn diverged(&self, step: usize, reason: String, last: Checkpoint) -> TrainError {
        TrainError::Divergence {
            epoch: self.epoch,
            step,
            reason,
            last: Box::new(last),
        }
    }

    pub fn evaluate(&self, graphs: &[Graph]) -> Result<SplitReport> {
        Ok(evaluate(&self.model, graphs, self.pipeline.filter)?)
    }

    /// Trains until `max_epoch`, evaluating val and test accuracy after each
    /// epoch and keeping the checkpoint with the best validation accuracy
    /// (earliest wins ties). `on_epoch` sees each record as it is made.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut best: Option<(Checkpoint, usize)> = None;
        while self.epoch < self.config.train.max_epoch {
            let lr = self.config.train.lr_at(self.epoch);
            let stats = self.train_epoch()?;
            let val = self.evaluate(&self.data.val)?.accuracy;
            let test = self.evaluate(&self.data.test)?.accuracy;
            let rec = EpochRecord {
                epoch: self.epoch,
                lr,
                stats,
                val_metric: val,
                test_metric: test,
            };
            on_epoch(&rec);
            history.push(rec);
            let improved = self.best_val.map_or(true, |b| val > b);
            if improved {
                self.best_val = Some(val);
            }
            if improved || best.is_none() {
                best = Some((self.checkpoint(), self.epoch));
            }
        }
        let (best, best_epoch) = match best {
            Some(b) => b,
            None => (self.checkpoint(), self.epoch),
        };
        Ok(TrainOutcome {
            history,
            best,
            best_epoch,
        })
    }
}
