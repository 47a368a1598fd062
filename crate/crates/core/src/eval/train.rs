//! Cross-entropy training of the backbone plus task heads on the synthetic
//! dataset. Gradients within a batch are computed per sample (in parallel)
//! and reduced in index order, so results are bit-identical for any worker
//! count; the optimizer is the shared Adam implementation.

use std::sync::Arc;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::opt::{AdamParams, AdamState};
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward, ViTConfig, ViTParams};

use super::dataset::{Split, SyntheticDataset};
use super::{classify_logits, dense_token_predictions, EvalError};

fn default_epochs() -> usize {
    4
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_train_seed() -> u64 {
    7
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_train_seed")]
    pub seed: u64,
    /// Also fit the binary per-token head (required by the dense task).
    #[serde(default = "default_true")]
    pub train_dense: bool,
    #[serde(default)]
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 7,
            train_dense: true,
            adam: AdamParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dense_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dense_accuracy: Option<f64>,
}

/// Per-sample loss and parameter gradients, aligned with the named-tensor
/// order of the params.
fn sample_gradients(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    index: usize,
    with_dense: bool,
) -> Result<(f64, Vec<Vec<f64>>), EvalError> {
    let sample = data.sample(Split::Train, index);
    let mut tape = Tape::new();
    let tracked = params.tracked(&mut tape);
    let out = forward(&mut tape, &sample.image, &tracked, cfg, false)?;

    let logits = out
        .logits
        .as_ref()
        .ok_or(EvalError::MissingHead("classifier"))?;
    let row = tape.reshape(logits, vec![1, logits.len()])?;
    let mut loss = tape.cross_entropy_mean(&row, Arc::new(vec![sample.label]))?;

    if with_dense {
        let head = tracked.dense.as_ref().ok_or(EvalError::MissingHead("dense"))?;
        let patch_tokens = tape.slice_rows(&out.token_features, 1, cfg.num_patches())?;
        let proj = tape.matmul(&patch_tokens, &head.weight)?;
        let bias = tape.repeat_rows(&head.bias, cfg.num_patches())?;
        let dense_logits = tape.add(&proj, &bias)?;
        let targets = data.token_labels(&sample, cfg.patch_size);
        let dense_loss = tape.cross_entropy_mean(&dense_logits, Arc::new(targets))?;
        loss = tape.add(&loss, &dense_loss)?;
    }

    let loss_value = loss.item();
    let named: Vec<(String, Tensor)> = tracked
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let grads = tape.backward(&loss)?;
    let collected = named
        .iter()
        .map(|(_, t)| match grads.wrt(t) {
            Some(g) => g.values().to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    Ok((loss_value, collected))
}

/// Train in place. Zero epochs is a no-op that still reports validation
/// metrics. A non-finite loss aborts with the offending epoch and step.
pub fn train(
    cfg: &ViTConfig,
    params: &mut ViTParams,
    data: &SyntheticDataset,
    tcfg: &TrainConfig,
) -> Result<TrainReport, EvalError> {
    cfg.validate()?;
    if cfg.num_classes.is_none() {
        return Err(EvalError::MissingHead("classifier"));
    }
    if tcfg.train_dense && params.dense.is_none() {
        params.attach_dense_head(cfg.embed_dim, tcfg.seed ^ 0xD0_5E);
    }
    if tcfg.batch_size == 0 {
        return Err(EvalError::Config("batch_size must be ≥ 1".into()));
    }

    let order_len = data.len(Split::Train);
    let mut states: Vec<AdamState> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.len()))
        .collect();

    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..order_len).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_total = 0.0;
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let per_sample: Vec<Result<(f64, Vec<Vec<f64>>), EvalError>> = batch
                .par_iter()
                .map(|&i| sample_gradients(cfg, params, data, i, tcfg.train_dense))
                .collect();

            // Reduce in index order: bit-identical for any worker count.
            let mut batch_loss = 0.0;
            let mut accum: Option<Vec<Vec<f64>>> = None;
            for res in per_sample {
                let (loss, grads) = res?;
                if !loss.is_finite() {
                    return Err(EvalError::Diverged { epoch, step });
                }
                batch_loss += loss;
                match &mut accum {
                    None => accum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.iter_mut().zip(g) {
                                *av += *gv;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut accum = accum.expect("non-empty batch");
            for g in &mut accum {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            loss_total += batch_loss * scale;

            for (((_, tensor), state), grad) in params
                .named_tensors_mut()
                .into_iter()
                .zip(&mut states)
                .zip(&accum)
            {
                let mut values = tensor.values().to_vec();
                state.step(&mut values, grad, tcfg.learning_rate, &tcfg.adam);
                *tensor = Tensor::new(tensor.shape().to_vec(), values).expect("same shape");
            }
        }

        let batches = order_len.div_ceil(tcfg.batch_size);
        let (val_accuracy, val_dense_accuracy) =
            validate(cfg, params, data, tcfg.train_dense)?;
        epochs.push(EpochLog {
            epoch,
            mean_loss: loss_total / batches.max(1) as f64,
            val_accuracy,
            val_dense_accuracy,
        });
    }

    let (val_accuracy, val_dense_accuracy) = validate(cfg, params, data, tcfg.train_dense)?;
    Ok(TrainReport {
        epochs,
        val_accuracy,
        val_dense_accuracy,
    })
}

fn validate(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    with_dense: bool,
) -> Result<(f64, Option<f64>), EvalError> {
    let n = data.len(Split::Val);
    if n == 0 {
        return Err(EvalError::EmptyDenominator("validation split is empty"));
    }
    let results: Vec<Result<(bool, usize, usize), EvalError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = data.sample(Split::Val, i);
            let mut tape = Tape::new();
            let out = forward(&mut tape, &sample.image, params, cfg, false)?;
            let logits = out
                .logits
                .as_ref()
                .ok_or(EvalError::MissingHead("classifier"))?;
            let correct = classify_logits(logits.values()) == sample.label;
            let (dense_hits, dense_total) = if with_dense {
                let preds = dense_token_predictions(&mut tape, cfg, params, &out)?;
                let truth = data.token_labels(&sample, cfg.patch_size);
                let hits = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
                (hits, truth.len())
            } else {
                (0, 0)
            };
            Ok((correct, dense_hits, dense_total))
        })
        .collect();

    let mut correct = 0usize;
    let mut dense_hits = 0usize;
    let mut dense_total = 0usize;
    for r in results {
        let (c, dh, dt) = r?;
        correct += c as usize;
        dense_hits += dh;
        dense_total += dt;
    }
    let acc = correct as f64 / n as f64;
    let dense = (dense_total > 0).then(|| dense_hits as f64 / dense_total as f64);
    Ok((acc, dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::DatasetSpec;
    use crate::vit::init_params;

    #[test]
    fn zero_epoch_train_is_a_noop() {
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            mlp_ratio: 2,
            num_classes: Some(4),
            ..ViTConfig::default()
        };
        let data = SyntheticDataset::new(DatasetSpec {
            image_size: 16,
            train_size: 8,
            val_size: 8,
            ..DatasetSpec::default()
        })
        .unwrap();
        let mut params = init_params(&cfg, 3).unwrap();
        let before: Vec<Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let tcfg = TrainConfig {
            epochs: 0,
            train_dense: false,
            ..TrainConfig::default()
        };
        let report = train(&cfg, &mut params, &data, &tcfg).unwrap();
        assert!(report.epochs.is_empty());
        for ((_, after), b) in params.named_tensors().into_iter().zip(&before) {
            assert_eq!(after, b);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns_a_little() {
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: Some(4),
            ..ViTConfig::default()
        };
        let data = SyntheticDataset::new(DatasetSpec {
            image_size: 16,
            train_size: 64,
            val_size: 32,
            ..DatasetSpec::default()
        })
        .unwrap();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut params = init_params(&cfg, 5).unwrap();
            let report = train(&cfg, &mut params, &data, &tcfg).unwrap();
            (params, report)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        for ((_, ta), (_, tb)) in pa.named_tensors().into_iter().zip(pb.named_tensors()) {
            assert_eq!(ta, tb);
        }
        assert_eq!(ra.val_accuracy, rb.val_accuracy);
        // Two epochs on an easy task should beat chance.
        assert!(ra.val_accuracy > 0.3, "val accuracy {}", ra.val_accuracy);
    }
}
