//! Evaluation harness: synthetic data, training, and the attack-success
//! protocols for classification, retrieval, dense per-token prediction, the
//! mode-comparison grid, and cross-model transfer.

use serde::Serialize;
use thiserror::Error;

use crate::attack::AttackError;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vit::{forward, ForwardOutput, ModelError, ViTConfig, ViTParams};

pub mod dataset;
mod metrics;
mod train;

pub use dataset::{DatasetSpec, Sample, Split, SyntheticDataset};
pub use metrics::{
    attack_success_rate_classification, dense_degradation, mode_comparison_report, success_at_k,
    transfer_matrix, ClassificationEval, CompareCell, CompareReport, CompareSizes, DenseEval,
    DenseMetrics, MetricReport, RetrievalEval, TransferReport,
};
pub use metrics::retrieval_success_at_k;
pub use train::{train, EpochLog, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty denominator: {0}")]
    EmptyDenominator(&'static str),
    #[error("k={k} exceeds gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("required head `{0}` is missing")]
    MissingHead(&'static str),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("model configs incompatible: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Index of the largest logit; first occurrence wins ties.
pub fn classify_logits(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// One inference pass returning the predicted class.
pub fn predict_class(
    cfg: &ViTConfig,
    params: &ViTParams,
    image: &Tensor,
) -> Result<usize, EvalError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, image, params, cfg, false)?;
    let logits = out.logits.as_ref().ok_or(EvalError::MissingHead("classifier"))?;
    Ok(classify_logits(logits.values()))
}

/// One inference pass returning the image embedding.
pub fn embedding_of(
    cfg: &ViTConfig,
    params: &ViTParams,
    image: &Tensor,
) -> Result<Vec<f64>, EvalError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, image, params, cfg, false)?;
    Ok(out.embedding.values().to_vec())
}

/// Per-patch-token class predictions from the dense head.
pub fn dense_token_predictions(
    tape: &mut Tape,
    cfg: &ViTConfig,
    params: &ViTParams,
    out: &ForwardOutput,
) -> Result<Vec<usize>, EvalError> {
    let head = params.dense.as_ref().ok_or(EvalError::MissingHead("dense"))?;
    let patch_tokens = tape.slice_rows(&out.token_features, 1, cfg.num_patches())?;
    let proj = tape.matmul(&patch_tokens, &head.weight)?;
    let bias = tape.repeat_rows(&head.bias, cfg.num_patches())?;
    let logits = tape.add(&proj, &bias)?;
    let classes = head.weight.shape()[1];
    Ok(logits
        .values()
        .chunks(classes)
        .map(classify_logits)
        .collect())
}

/// Short provenance fingerprint: CRC-32 of the canonical JSON encoding.
pub fn config_fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    format!("{:08x}", crate::io::crc32(&json))
}

/// Pixel sum of an image and perturbation, staying in the same shape.
pub(crate) fn apply_perturbation(image: &Tensor, z: &Tensor) -> Tensor {
    let values: Vec<f64> = image
        .values()
        .iter()
        .zip(z.values())
        .map(|(&x, &d)| x + d)
        .collect();
    Tensor::new(image.shape().to_vec(), values).expect("same shape")
}
