//! Vision-language DR classifier.
//!
//! Class labels are replaced by clinical text descriptions: each description
//! is embedded by a frozen text encoder, an image is embedded by a small patch
//! transformer, and their dot products are the class scores. The grade block
//! of the scores goes through a temperature-scaled softmax, the lesion block
//! through per-entry sigmoids.

mod checkpoint;
mod encoder;
mod head;
mod text;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use encoder::{
    encode_image, encoder_input, patchify, unpatchify, BackwardMode, EncoderConfig, EncoderParams,
    ForwardCache, LayerParams,
};
pub use head::{
    loss_and_score_grad, predict, semantic_loss, similarity_scores, PredictionRecord, TargetVector,
    LOSS_EPS,
};
pub use text::{encode_text, DescriptionSet, TextEmbeddings, TextEncoder, DEFAULT_DESCRIPTIONS};
pub use train::{
    full_batch_loss, sample_gradients, train, LabeledImage, Optimizer, TrainHyper, TrainOutcome,
};

use image::RgbImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VlError {
    #[error("invalid description set: {0}")]
    InvalidDescriptions(String),
    #[error("empty description text for {0}")]
    EmptyText(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A trained encoder together with the frozen text embeddings it was trained
/// against. This is the unit the severity-regression loop grades with.
#[derive(Clone, Debug, PartialEq)]
pub struct VlModel {
    pub params: EncoderParams,
    pub text: TextEmbeddings,
}

impl VlModel {
    pub fn new(params: EncoderParams, text: TextEmbeddings) -> Result<Self, VlError> {
        if text.dim() != params.config.dim {
            return Err(VlError::Shape(format!(
                "text dim {} vs encoder dim {}",
                text.dim(),
                params.config.dim
            )));
        }
        Ok(Self { params, text })
    }

    pub fn predict_image(&self, image: &RgbImage) -> Result<PredictionRecord, VlError> {
        let e = encode_image(image, &self.params)?;
        let s = similarity_scores(&self.text, &e)?;
        Ok(predict(&s, self.params.temperature))
    }
}
