//! Full model assembly: pre-encoders, speaker injection, per-modality graph
//! attention, cross-modal attention, fusion and classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, Modality, ModelConfig};
use crate::data::{Conversation, DatasetMeta};
use crate::encoder::{AvEncoder, SpeakerTable, TextEncoder};
use crate::gradcheck::{check_grads, GradcheckReport};
use crate::graph::{build_graph, GraphError};
use crate::head::ClassifierHead;
use crate::mdgat::MdgatStack;
use crate::mpcat::MpcatStack;
use crate::tensor::{Mode, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input: {0}")]
    Input(String),
}

enum ModalityEncoder {
    Recurrent(TextEncoder),
    Affine(AvEncoder),
}

struct ModalityPipeline {
    modality: Modality,
    encoder: ModalityEncoder,
    graph_stack: MdgatStack,
}

/// A built model: parameter store plus the wiring that consumes it.
pub struct Model {
    config: ModelConfig,
    meta: DatasetMeta,
    store: ParamStore,
    pipelines: Vec<ModalityPipeline>,
    speaker: SpeakerTable,
    cross_stack: MpcatStack,
    head: ClassifierHead,
}

/// Result of one conversation forward pass.
pub struct ConversationOutput {
    pub probs: Var,
    pub preds: Vec<usize>,
}

impl Model {
    /// Builds and initializes a model for the given dataset shape. All
    /// parameter draws come from a generator seeded with `config.seed`, so
    /// identical config + meta always produce identical weights.
    pub fn build(config: ModelConfig, meta: DatasetMeta) -> Result<Self, ModelError> {
        config.validate()?;
        for m in config.modalities.members() {
            let dim = meta.dims[m.dim_index()];
            if dim == 0 {
                return Err(ModelError::Input(format!(
                    "modality {} has zero feature dim in dataset metadata",
                    m.tag()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;

        let mut pipelines = Vec::new();
        for modality in config.modalities.members() {
            let tag = modality.tag();
            let in_dim = meta.dims[modality.dim_index()];
            let encoder = match modality {
                Modality::Text => ModalityEncoder::Recurrent(TextEncoder::build(
                    &mut store,
                    &mut rng,
                    &format!("enc.{tag}"),
                    in_dim,
                    d,
                )),
                _ => ModalityEncoder::Affine(AvEncoder::build(
                    &mut store,
                    &mut rng,
                    &format!("enc.{tag}"),
                    in_dim,
                    d,
                )),
            };
            let graph_stack = MdgatStack::build(
                &mut store,
                &mut rng,
                &format!("gat.{tag}"),
                d,
                config.message_dim(),
                config.heads,
                config.graph_layers,
                config.update_rule,
            );
            pipelines.push(ModalityPipeline {
                modality,
                encoder,
                graph_stack,
            });
        }

        let speaker = SpeakerTable::build(&mut store, &mut rng, "spk", meta.num_speakers, d);
        let cross_stack = MpcatStack::build(
            &mut store,
            &mut rng,
            "cross",
            d,
            config.heads,
            config.modalities.len(),
            config.feedforward_dim(),
            config.cross_layers,
            config.dropout,
        );
        let head = ClassifierHead::build(
            &mut store,
            &mut rng,
            "head",
            d,
            config.classifier_dim(),
            meta.num_classes,
            config.modalities.len(),
        );

        Ok(Self {
            config,
            meta,
            store,
            pipelines,
            speaker,
            cross_stack,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn features_of(
        &self,
        conv: &Conversation,
        modality: Modality,
    ) -> Result<Tensor, ModelError> {
        let dim = self.meta.dims[modality.dim_index()];
        let mut data = Vec::with_capacity(conv.len() * dim);
        for (i, utt) in conv.utterances.iter().enumerate() {
            let feat = match modality {
                Modality::Text => &utt.text_feat,
                Modality::Audio => &utt.audio_feat,
                Modality::Visual => &utt.visual_feat,
            };
            if feat.len() != dim {
                return Err(ModelError::Input(format!(
                    "conversation '{}' utterance {i} modality {} has dim {} (model expects {dim})",
                    conv.id,
                    modality.tag(),
                    feat.len()
                )));
            }
            data.extend_from_slice(feat);
        }
        Ok(Tensor::from_vec(conv.len(), dim, data)?)
    }

    /// Forward pass over one conversation against an explicit parameter
    /// store. The store must have the exact layout this model was built with;
    /// the gradient checker exploits this to probe perturbed copies.
    pub fn forward_with_store(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        conv: &Conversation,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConversationOutput, ModelError> {
        if conv.is_empty() {
            return Err(ModelError::Input(format!(
                "conversation '{}' has no utterances",
                conv.id
            )));
        }
        let speakers = conv.speakers();
        if let Some(&bad) = speakers.iter().find(|&&s| s >= self.meta.num_speakers) {
            return Err(ModelError::Input(format!(
                "conversation '{}' references speaker {bad} (model knows {})",
                conv.id, self.meta.num_speakers
            )));
        }
        let graph = build_graph(
            conv.len(),
            self.config.window_past,
            self.config.window_future,
        );

        let mut states = Vec::with_capacity(self.pipelines.len());
        for pipeline in &self.pipelines {
            let feats = self.features_of(conv, pipeline.modality)?;
            let input = tape.constant(feats);
            let encoded = match &pipeline.encoder {
                ModalityEncoder::Recurrent(enc) => enc.forward(tape, store, input)?,
                ModalityEncoder::Affine(enc) => enc.forward(tape, store, input)?,
            };
            let injected = self.speaker.inject(
                tape,
                store,
                encoded,
                &speakers,
                self.config.speaker_scale,
            )?;
            let contextual = pipeline.graph_stack.forward(tape, store, injected, &graph)?;
            states.push(contextual);
        }

        let crossed = self.cross_stack.forward(tape, store, states, mode, rng)?;
        let fused = self.head.fuse(tape, store, &crossed)?;
        let (probs, preds) = self.head.classify(tape, store, fused)?;
        Ok(ConversationOutput { probs, preds })
    }

    /// Forward with the model's own parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        conv: &Conversation,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConversationOutput, ModelError> {
        self.forward_with_store(&self.store, tape, conv, mode, rng)
    }

    /// Eval-mode predictions and probabilities for one conversation.
    pub fn predict(&self, conv: &Conversation) -> Result<(Vec<usize>, Tensor), ModelError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, conv, Mode::Eval, &mut rng)?;
        Ok((out.preds, tape.value(out.probs).clone()))
    }

    /// Mean eval-mode cross-entropy of one conversation under an explicit
    /// store; the scalar loss used by the gradient checker.
    pub fn conversation_loss(
        &self,
        store: &ParamStore,
        conv: &Conversation,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_with_store(store, &mut tape, conv, Mode::Eval, &mut rng)?;
        let loss = crate::head::loss(&mut tape, out.probs, &conv.labels(), conv.len())?;
        Ok(tape.value(loss).item())
    }

    /// Full-model gradient check on one conversation: analytic gradients
    /// against central finite differences, eval mode (dropout is identity).
    pub fn gradcheck(
        &mut self,
        conv: &Conversation,
        step: f64,
    ) -> Result<GradcheckReport, ModelError> {
        self.store.zero_grads();
        {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = self.forward(&mut tape, conv, Mode::Eval, &mut rng)?;
            let loss = crate::head::loss(&mut tape, out.probs, &conv.labels(), conv.len())?;
            tape.backward(loss)?;
            tape.harvest_grads(&mut self.store);
        }
        let mut store = std::mem::take(&mut self.store);
        let result = check_grads(&mut store, |s| self.conversation_loss(s, conv), step);
        self.store = store;
        result
    }

    /// Replaces every parameter with the same-named tensors of another store
    /// (used by checkpoint restore). Shapes and names must match exactly.
    pub fn load_params(
        &mut self,
        params: &[(String, Tensor)],
    ) -> Result<(), ModelError> {
        if params.len() != self.store.len() {
            return Err(ModelError::Input(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, tensor) in params {
            let id = self.store.id_by_name(name).ok_or_else(|| {
                ModelError::Input(format!("checkpoint parameter '{name}' unknown to this model"))
            })?;
            let existing = self.store.get(id);
            if existing.shape() != tensor.shape() {
                return Err(ModelError::Input(format!(
                    "checkpoint parameter '{name}' has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    existing.shape()
                )));
            }
            *self.store.get_mut(id) = tensor.clone().with_grad();
        }
        Ok(())
    }
}
