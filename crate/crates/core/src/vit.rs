//! Desk-scale vision transformer.
//!
//! Pre-LN blocks (LN → attention → residual; LN → MLP → residual) over patch
//! tokens with a prepended CLS token. Every forward pass can surface the full
//! per-layer, per-head attention stack as tracked tensors, so losses defined
//! on attention matrices differentiate through them without special casing.
//! The image embedding is the CLS row of the final layer norm.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image shape {got:?} does not match config expectation {expected:?}")]
    ImageShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn default_channels() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_ln_eps() -> f64 {
    1e-5
}

/// Architecture of the backbone. `head_dim` and the token count are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl Default for ViTConfig {
    /// 32×32 single-channel images, 8-pixel patches, d=64, 4 heads, 4 layers:
    /// 17 tokens, small enough for f64 finite-difference checks.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4,
            num_classes: Some(4),
            layer_norm_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "image_size and patch_size must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(ModelError::InvalidConfig("num_layers must be ≥ 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::InvalidConfig("mlp_ratio must be ≥ 1".into()));
        }
        if self.channels == 0 {
            return Err(ModelError::InvalidConfig("channels must be ≥ 1".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::InvalidConfig("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count, CLS excluded.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including the prepended CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened patch length: channels · patch_size².
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Linear head on top of backbone features.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All parameters of the backbone plus optional task heads. Immutable during
/// forward passes; attacks treat them as constants.
#[derive(Debug, Clone)]
pub struct ViTParams {
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub classifier: Option<LinearHead>,
    pub dense: Option<LinearHead>,
}

/// Number of distinct per-token classes predicted by the dense head:
/// background vs. pattern foreground.
pub const DENSE_CLASSES: usize = 2;

impl ViTParams {
    /// Named views of every parameter tensor, in a stable documented order.
    /// Names group as `<group>.<part>`; the checkpoint manifest mirrors them.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls_token".into(), &self.cls_token),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.attn_q.weight"), &l.wq));
            out.push((format!("layers.{i}.attn_q.bias"), &l.bq));
            out.push((format!("layers.{i}.attn_k.weight"), &l.wk));
            out.push((format!("layers.{i}.attn_k.bias"), &l.bk));
            out.push((format!("layers.{i}.attn_v.weight"), &l.wv));
            out.push((format!("layers.{i}.attn_v.bias"), &l.bv));
            out.push((format!("layers.{i}.attn_out.weight"), &l.wo));
            out.push((format!("layers.{i}.attn_out.bias"), &l.bo));
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2_bias));
            out.push((format!("layers.{i}.mlp_fc1.weight"), &l.mlp_w1));
            out.push((format!("layers.{i}.mlp_fc1.bias"), &l.mlp_b1));
            out.push((format!("layers.{i}.mlp_fc2.weight"), &l.mlp_w2));
            out.push((format!("layers.{i}.mlp_fc2.bias"), &l.mlp_b2));
        }
        out.push(("final_ln.gain".into(), &self.final_gain));
        out.push(("final_ln.bias".into(), &self.final_bias));
        if let Some(h) = &self.classifier {
            out.push(("classifier.weight".into(), &h.weight));
            out.push(("classifier.bias".into(), &h.bias));
        }
        if let Some(h) = &self.dense {
            out.push(("dense.weight".into(), &h.weight));
            out.push(("dense.bias".into(), &h.bias));
        }
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors); same
    /// order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("pos_embed".into(), &mut self.pos_embed),
            ("cls_token".into(), &mut self.cls_token),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("layers.{i}.attn_q.weight"), &mut l.wq));
            out.push((format!("layers.{i}.attn_q.bias"), &mut l.bq));
            out.push((format!("layers.{i}.attn_k.weight"), &mut l.wk));
            out.push((format!("layers.{i}.attn_k.bias"), &mut l.bk));
            out.push((format!("layers.{i}.attn_v.weight"), &mut l.wv));
            out.push((format!("layers.{i}.attn_v.bias"), &mut l.bv));
            out.push((format!("layers.{i}.attn_out.weight"), &mut l.wo));
            out.push((format!("layers.{i}.attn_out.bias"), &mut l.bo));
            out.push((format!("layers.{i}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), &mut l.ln2_bias));
            out.push((format!("layers.{i}.mlp_fc1.weight"), &mut l.mlp_w1));
            out.push((format!("layers.{i}.mlp_fc1.bias"), &mut l.mlp_b1));
            out.push((format!("layers.{i}.mlp_fc2.weight"), &mut l.mlp_w2));
            out.push((format!("layers.{i}.mlp_fc2.bias"), &mut l.mlp_b2));
        }
        out.push(("final_ln.gain".into(), &mut self.final_gain));
        out.push(("final_ln.bias".into(), &mut self.final_bias));
        if let Some(h) = &mut self.classifier {
            out.push(("classifier.weight".into(), &mut h.weight));
            out.push(("classifier.bias".into(), &mut h.bias));
        }
        if let Some(h) = &mut self.dense {
            out.push(("dense.weight".into(), &mut h.weight));
            out.push(("dense.bias".into(), &mut h.bias));
        }
        out
    }

    /// Copy whose tensors are registered as tape leaves, for training.
    pub fn tracked(&self, tape: &mut Tape) -> ViTParams {
        let mut copy = self.clone();
        for (_, t) in copy.named_tensors_mut() {
            *t = tape.leaf(t.clone());
        }
        copy
    }

    /// Attach a fresh binary dense head (background vs. pattern per token).
    pub fn attach_dense_head(&mut self, embed_dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dense = Some(LinearHead {
            weight: trunc_normal_tensor(&mut rng, vec![embed_dim, DENSE_CLASSES], INIT_STD),
            bias: Tensor::zeros(vec![DENSE_CLASSES]),
        });
    }
}

/// All attention matrices of one forward pass, indexed (layer, head); each
/// head tensor is `[num_tokens, num_tokens]` and row-stochastic.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    per_layer: Vec<Vec<Tensor>>,
    num_tokens: usize,
}

impl AttentionStack {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn num_heads(&self) -> usize {
        self.per_layer.first().map_or(0, |l| l.len())
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Heads of one layer (0-based).
    pub fn layer(&self, layer: usize) -> &[Tensor] {
        &self.per_layer[layer]
    }

    pub fn head(&self, layer: usize, head: usize) -> &Tensor {
        &self.per_layer[layer][head]
    }

    /// Flat `[num_heads, n, n]` copy of one layer's stack.
    pub fn layer_array(&self, layer: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.per_layer[layer] {
            out.extend_from_slice(h.values());
        }
        out
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// CLS feature after the final layer norm, shape `[embed_dim]`.
    pub embedding: Tensor,
    /// All token features after the final layer norm, `[num_tokens, embed_dim]`.
    pub token_features: Tensor,
    /// Populated when requested.
    pub attention: Option<AttentionStack>,
    /// Classifier logits `[num_classes]` when the probe head is present.
    pub logits: Option<Tensor>,
}

/// Flat index map realizing non-overlapping patch extraction: output position
/// (token, channel, dy, dx) reads pixel (channel, py·p+dy, px·p+dx) with
/// tokens in row-major grid order.
fn patch_index_map(cfg: &ViTConfig) -> Vec<usize> {
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let grid = cfg.grid();
    let mut idx = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(c * s * s + (py * p + dy) * s + (px * p + dx));
                    }
                }
            }
        }
    }
    idx
}

/// Split an image `[channels, H, W]` into flattened non-overlapping patches
/// `[(H/p)², channels·p²]`, grid row-major, patch contents channel-major.
pub fn patchify(tape: &mut Tape, image: &Tensor, cfg: &ViTConfig) -> Result<Tensor, ModelError> {
    let expected = cfg.image_shape();
    if image.shape() != expected.as_slice() {
        return Err(ModelError::ImageShape {
            expected,
            got: image.shape().to_vec(),
        });
    }
    let idx = Arc::new(patch_index_map(cfg));
    let out = tape.gather(image, idx, vec![cfg.num_patches(), cfg.patch_dim()])?;
    Ok(out)
}

/// Linear layer helper: `x·w + bias` with the bias tiled over rows.
fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let prod = tape.matmul(x, w)?;
    let rows = prod.shape()[0];
    let bias = tape.repeat_rows(b, rows)?;
    tape.add(&prod, &bias)
}

/// Multi-head self-attention on an already-normalized token matrix.
///
/// Returns the pre-residual block output and the per-head attention
/// matrices. Each head's rows are softmax-normalized, so they sum to one.
pub fn attention_forward(
    tape: &mut Tape,
    x: &Tensor,
    layer: &LayerParams,
    cfg: &ViTConfig,
) -> Result<(Tensor, Vec<Tensor>), ModelError> {
    let tokens = x.shape()[0];
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let q = linear(tape, x, &layer.wq, &layer.bq)?;
    let k = linear(tape, x, &layer.wk, &layer.bk)?;
    let v = linear(tape, x, &layer.wv, &layer.bv)?;

    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut outputs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(&q, h * dk, dk)?;
        let kh = tape.slice_cols(&k, h * dk, dk)?;
        let vh = tape.slice_cols(&v, h * dk, dk)?;
        let kt = tape.transpose(&kh)?;
        let logits = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&logits, scale);
        let attn = tape.softmax_rows(&scaled)?;
        let out = tape.matmul(&attn, &vh)?;
        debug_assert_eq!(attn.shape(), &[tokens, tokens]);
        heads.push(attn);
        outputs.push(out);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    let merged = tape.concat_cols(&refs)?;
    let projected = linear(tape, &merged, &layer.wo, &layer.bo)?;
    Ok((projected, heads))
}

/// Full forward pass. Deterministic given (image, params); the attention
/// stack is returned when `want_attention` is set and participates in the
/// recorded graph like any other intermediate.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    params: &ViTParams,
    cfg: &ViTConfig,
    want_attention: bool,
) -> Result<ForwardOutput, ModelError> {
    let tokens = patchify(tape, image, cfg)?;
    let embedded = linear(tape, &tokens, &params.patch_weight, &params.patch_bias)?;

    let n_tokens = cfg.num_tokens();
    let cls_row = tape.reshape(&params.cls_token, vec![1, cfg.embed_dim])?;
    let with_cls = tape.concat_rows(&[&cls_row, &embedded])?;
    let mut x = tape.add(&with_cls, &params.pos_embed)?;

    let mut stack = Vec::with_capacity(cfg.num_layers);
    for layer in &params.layers {
        let normed = tape.layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias, cfg.layer_norm_eps)?;
        let (attn_out, heads) = attention_forward(tape, &normed, layer, cfg)?;
        x = tape.add(&x, &attn_out)?;

        let normed2 = tape.layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias, cfg.layer_norm_eps)?;
        let hidden = linear(tape, &normed2, &layer.mlp_w1, &layer.mlp_b1)?;
        let activated = tape.gelu(&hidden);
        let mlp_out = linear(tape, &activated, &layer.mlp_w2, &layer.mlp_b2)?;
        x = tape.add(&x, &mlp_out)?;

        stack.push(heads);
    }

    let features = tape.layer_norm(&x, &params.final_gain, &params.final_bias, cfg.layer_norm_eps)?;
    let cls_feature = tape.slice_rows(&features, 0, 1)?;
    let embedding = tape.reshape(&cls_feature, vec![cfg.embed_dim])?;

    let logits = match &params.classifier {
        Some(head) => {
            let row = linear(tape, &cls_feature, &head.weight, &head.bias)?;
            let classes = head.weight.shape()[1];
            Some(tape.reshape(&row, vec![classes])?)
        }
        None => None,
    };

    Ok(ForwardOutput {
        embedding,
        token_features: features,
        attention: want_attention.then(|| AttentionStack {
            per_layer: stack,
            num_tokens: n_tokens,
        }),
        logits,
    })
}

/// Initializer spread for weight matrices (truncated normal at ±2σ).
pub const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller, rejecting samples beyond two standard deviations.
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn trunc_normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| trunc_normal(rng, std)).collect();
    Tensor::new(shape, values).expect("shape/len consistent")
}

/// Reproducible initialization: truncated-normal (std 0.02, cut at ±2σ)
/// weights; zeros for all biases, the CLS token, and positional embeddings;
/// layer-norm gains start at one. Same seed, same bits.
pub fn init_params(cfg: &ViTConfig, seed: u64) -> Result<ViTParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;

    let patch_weight = trunc_normal_tensor(&mut rng, vec![cfg.patch_dim(), d], INIT_STD);
    let patch_bias = Tensor::zeros(vec![d]);
    let pos_embed = Tensor::zeros(vec![cfg.num_tokens(), d]);
    let cls_token = Tensor::zeros(vec![d]);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerParams {
            ln1_gain: Tensor::filled(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: trunc_normal_tensor(&mut rng, vec![d, d], INIT_STD),
            bq: Tensor::zeros(vec![d]),
            wk: trunc_normal_tensor(&mut rng, vec![d, d], INIT_STD),
            bk: Tensor::zeros(vec![d]),
            wv: trunc_normal_tensor(&mut rng, vec![d, d], INIT_STD),
            bv: Tensor::zeros(vec![d]),
            wo: trunc_normal_tensor(&mut rng, vec![d, d], INIT_STD),
            bo: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            mlp_w1: trunc_normal_tensor(&mut rng, vec![d, hidden], INIT_STD),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: trunc_normal_tensor(&mut rng, vec![hidden, d], INIT_STD),
            mlp_b2: Tensor::zeros(vec![d]),
        });
    }

    let final_gain = Tensor::filled(vec![d], 1.0);
    let final_bias = Tensor::zeros(vec![d]);
    let classifier = cfg.num_classes.map(|classes| LinearHead {
        weight: trunc_normal_tensor(&mut rng, vec![d, classes], INIT_STD),
        bias: Tensor::zeros(vec![classes]),
    });

    Ok(ViTParams {
        patch_weight,
        patch_bias,
        pos_embed,
        cls_token,
        layers,
        final_gain,
        final_bias,
        classifier,
        dense: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: Some(3),
            layer_norm_eps: 1e-5,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            patch_size: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_heads = ViTConfig {
            num_heads: 3,
            ..ViTConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn token_count_matches_grid() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.num_tokens(), 17);
    }

    #[test]
    fn patchify_layout_top_left_block() {
        // 4×4 image, p=2 → 4 tokens of length 4; token 0 is the top-left block.
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            num_heads: 1,
            num_layers: 1,
            mlp_ratio: 1,
            num_classes: None,
            layer_norm_eps: 1e-5,
        };
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let image = Tensor::new(vec![1, 4, 4], vals).unwrap();
        let mut tape = Tape::new();
        let tokens = patchify(&mut tape, &image, &cfg).unwrap();
        assert_eq!(tokens.shape(), &[4, 4]);
        assert_eq!(&tokens.values()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // Last token is the bottom-right block.
        assert_eq!(&tokens.values()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_constant_image_gives_identical_tokens() {
        let cfg = tiny_cfg();
        let image = Tensor::filled(cfg.image_shape(), 0.7);
        let mut tape = Tape::new();
        let tokens = patchify(&mut tape, &image, &cfg).unwrap();
        let first = tokens.values()[0..cfg.patch_dim()].to_vec();
        for t in 1..cfg.num_patches() {
            assert_eq!(
                &tokens.values()[t * cfg.patch_dim()..(t + 1) * cfg.patch_dim()],
                &first[..]
            );
        }
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 3).unwrap();
        let d = cfg.embed_dim;
        params.layers[0].wq = Tensor::zeros(vec![d, d]);
        params.layers[0].bq = Tensor::zeros(vec![d]);
        params.layers[0].wk = Tensor::zeros(vec![d, d]);
        params.layers[0].bk = Tensor::zeros(vec![d]);

        let image = Tensor::filled(cfg.image_shape(), 0.3);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &image, &params, &cfg, true).unwrap();
        let stack = out.attention.unwrap();
        let n = cfg.num_tokens() as f64;
        for h in 0..cfg.num_heads {
            for v in stack.head(0, h).values() {
                assert!((v - 1.0 / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let image = Tensor::new(
            cfg.image_shape(),
            (0..cfg.channels * cfg.image_size * cfg.image_size)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &image, &params, &cfg, true).unwrap();
        let stack = out.attention.unwrap();
        let n = cfg.num_tokens();
        for l in 0..cfg.num_layers {
            for h in 0..cfg.num_heads {
                for row in stack.head(l, h).values().chunks(n) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        // Degenerate one-token case exercises the op directly.
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 5).unwrap();
        let x = Tensor::new(vec![1, cfg.embed_dim], vec![0.2; cfg.embed_dim]).unwrap();
        let mut tape = Tape::new();
        let (_, heads) = attention_forward(&mut tape, &x, &params.layers[0], &cfg).unwrap();
        for h in heads {
            assert_eq!(h.values(), &[1.0]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 7).unwrap();
        let image = Tensor::filled(cfg.image_shape(), 0.42);
        let run = || {
            let mut tape = Tape::new();
            forward(&mut tape, &image, &params, &cfg, true).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.embedding, b.embedding);
        let (sa, sb) = (a.attention.unwrap(), b.attention.unwrap());
        for l in 0..cfg.num_layers {
            for h in 0..cfg.num_heads {
                assert_eq!(sa.head(l, h), sb.head(l, h));
            }
        }
    }

    #[test]
    fn forward_embedding_is_finite_and_nonzero() {
        let cfg = ViTConfig::default();
        let params = init_params(&cfg, 7).unwrap();
        let mut vals = vec![0.0; 32 * 32];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = ((i % 7) as f64) / 7.0;
        }
        let image = Tensor::new(cfg.image_shape(), vals).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &image, &params, &cfg, false).unwrap();
        assert!(out.embedding.all_finite());
        let norm: f64 = out.embedding.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
    }

    #[test]
    fn want_attention_does_not_change_embedding() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 21).unwrap();
        let image = Tensor::filled(cfg.image_shape(), 0.13);
        let mut t1 = Tape::new();
        let with = forward(&mut t1, &image, &params, &cfg, true).unwrap();
        let mut t2 = Tape::new();
        let without = forward(&mut t2, &image, &params, &cfg, false).unwrap();
        assert_eq!(with.embedding, without.embedding);
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let cfg = ViTConfig::default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        for ((na, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(*ta, tb, "mismatch in {na}");
        }
        for (name, t) in a.named_tensors() {
            if name.ends_with(".bias") || name == "cls_token" || name == "pos_embed" {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a.patch_weight, c.patch_weight);
    }

    #[test]
    fn init_weight_std_in_documented_band() {
        let cfg = ViTConfig::default();
        let params = init_params(&cfg, 9).unwrap();
        for (name, t) in params.named_tensors() {
            if name.ends_with(".weight") && t.len() >= 1024 {
                let n = t.len() as f64;
                let mean: f64 = t.values().iter().sum::<f64>() / n;
                let var: f64 = t.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                assert!(
                    (0.015..=0.025).contains(&std),
                    "{name}: empirical std {std}"
                );
            }
        }
    }

    #[test]
    fn permuting_patches_and_positions_preserves_cls_embedding() {
        let cfg = tiny_cfg();
        // Non-zero positional embeddings so the permutation actually moves them.
        let mut params = init_params(&cfg, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        params.pos_embed = Tensor::new(
            vec![cfg.num_tokens(), cfg.embed_dim],
            (0..cfg.num_tokens() * cfg.embed_dim)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
        )
        .unwrap();

        let image = Tensor::new(
            cfg.image_shape(),
            (0..cfg.image_size * cfg.image_size)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap();

        // Permutation over patch tokens.
        let perm: Vec<usize> = vec![2, 0, 3, 1];
        let p = cfg.patch_size;
        let s = cfg.image_size;
        let grid = cfg.grid();

        // Move patch blocks of the image according to the permutation.
        let mut permuted_pixels = vec![0.0; s * s];
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / grid * p, dst % grid * p);
            let (sy, sx) = (src / grid * p, src % grid * p);
            for r in 0..p {
                for c in 0..p {
                    permuted_pixels[(dy + r) * s + (dx + c)] =
                        image.values()[(sy + r) * s + (sx + c)];
                }
            }
        }
        let permuted_image = Tensor::new(cfg.image_shape(), permuted_pixels).unwrap();

        // Move the matching positional rows (CLS row stays put).
        let d = cfg.embed_dim;
        let mut permuted_pos = params.pos_embed.values().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            let from = (1 + src) * d;
            let to = (1 + dst) * d;
            let row = params.pos_embed.values()[from..from + d].to_vec();
            permuted_pos[to..to + d].copy_from_slice(&row);
        }
        let mut permuted_params = params.clone();
        permuted_params.pos_embed =
            Tensor::new(vec![cfg.num_tokens(), d], permuted_pos).unwrap();

        let mut t1 = Tape::new();
        let base = forward(&mut t1, &image, &params, &cfg, false).unwrap();
        let mut t2 = Tape::new();
        let perm_out = forward(&mut t2, &permuted_image, &permuted_params, &cfg, false).unwrap();
        for (a, b) in base.embedding.values().iter().zip(perm_out.embedding.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn input_gradient_is_nonzero() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2).unwrap();
        let image = Tensor::filled(cfg.image_shape(), 0.4);
        let mut tape = Tape::new();
        let tracked = tape.leaf(image);
        let out = forward(&mut tape, &tracked, &params, &cfg, false).unwrap();
        let sq = tape.square(&out.embedding);
        let loss = tape.sum(&sq, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&tracked).unwrap();
        assert!(g.values().iter().any(|&v| v != 0.0));
    }
}
