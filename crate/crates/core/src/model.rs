//! The full parameter set (encoder, projection head, classifier) and
//! batched inference over frozen weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{rows_of, softmax, Classifier, ProjectionHead};
use crate::encoder::{Backbone, Encoder, EncoderConfig, ForwardOptions};
use crate::graph::{make_batch, Graph, GraphError};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

/// Shape of a model; enough to rebuild an empty parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub backbone: Backbone,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projection: ProjectionHead,
    pub classifier: Classifier,
}

/// A parameter tensor in serializable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            EncoderConfig {
                input_dim: spec.input_dim,
                emb_dim: spec.emb_dim,
                layers: spec.layers,
                dropout: spec.dropout,
                backbone: spec.backbone,
            },
            &mut store,
            rng,
        );
        let projection = ProjectionHead::new(&mut store, spec.emb_dim, spec.emb_dim, rng);
        let classifier = Classifier::new(&mut store, spec.emb_dim, spec.classes, rng);
        Self {
            spec,
            store,
            encoder,
            projection,
            classifier,
        }
    }

    pub fn export_params(&self) -> Vec<NamedTensor> {
        self.store
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every parameter from `params`, which must list exactly
    /// this model's names and shapes in order.
    pub fn import_params(&mut self, params: &[NamedTensor]) -> Result<(), ModelError> {
        if params.len() != self.store.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                self.store.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = self.store.ids().collect();
        for (id, p) in ids.into_iter().zip(params) {
            if self.store.name(id) != p.name || self.store.get(id).shape() != p.shape.as_slice() {
                return Err(ModelError::Layout(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    p.name,
                    p.shape,
                    self.store.name(id),
                    self.store.get(id).shape()
                )));
            }
            let fresh = Tensor::new(p.shape.clone(), p.data.clone())?;
            self.store.get_mut(id).data_mut().copy_from_slice(fresh.data());
        }
        Ok(())
    }

    /// Runs the model without gradients over `graphs`, in chunks of
    /// `batch_size`. Every chunk is independent, so results do not depend
    /// on the chunk size.
    pub fn infer(&self, graphs: &[Graph], filter: bool, batch_size: usize) -> Result<Inference, ModelError> {
        let mut out = Inference::default();
        for chunk in graphs.chunks(batch_size.max(1)) {
            let refs: Vec<&Graph> = chunk.iter().collect();
            let batch = make_batch(&refs)?;
            let tape = Tape::inference();
            let enc = self
                .encoder
                .forward(&tape, &self.store, &batch, &mut ForwardOptions {
                    filter,
                    dropout_rng: None,
                })?;
            let logits = self.classifier.logits(&tape, &self.store, enc.graph_emb)?;
            let z = self.projection.forward(&tape, &self.store, enc.graph_emb)?;
            out.probs.extend(rows_of(&tape, logits).iter().map(|r| softmax(r)));
            out.embeddings.extend(rows_of(&tape, z));
            let ns = enc.node_scores.map(|v| tape.data(v));
            let es = enc.edge_scores.map(|v| tape.data(v));
            for g in 0..batch.num_graphs() {
                let nr = batch.node_range(g);
                let er = batch.edge_range(g);
                out.node_scores.push(match &ns {
                    Some(s) => s[nr].to_vec(),
                    None => vec![1.0; nr.len()],
                });
                out.edge_scores.push(match &es {
                    Some(s) => s[er].to_vec(),
                    None => vec![1.0; er.len()],
                });
            }
        }
        Ok(out)
    }
}

/// Per-graph outputs of [`Model::infer`].
#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub probs: Vec<Vec<f64>>,
    /// Normalized projection-head outputs.
    pub embeddings: Vec<Vec<f64>>,
    pub node_scores: Vec<Vec<f64>>,
    pub edge_scores: Vec<Vec<f64>>,
}

impl Inference {
    /// Argmax class per graph; ties go to the lower class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect()
    }
}
