//! Budget-bounded attack on attention matrices and image embeddings.
//!
//! The optimizer minimizes, under an L∞ budget ε:
//!   - attention mode: the mean elementwise product between the clean and the
//!     perturbed attention of one layer, summed over heads, CLS row and
//!     column excluded — driving perturbed attention off the clean support;
//!   - embedding mode: the negated distance ‖E_clean − E_adv‖₂, i.e. it
//!     pushes the embedding away from its clean position;
//!   - combined mode: both, rebalanced every iteration so the two terms enter
//!     with equal magnitude.
//!
//! Clean-pass activations are constants: no gradient flows through them, and
//! the balance factor β is recomputed from loss values each iteration rather
//! than differentiated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opt::{AdamParams, AdamState};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vit::{forward, ModelError, ViTConfig, ViTParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Arg(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which loss drives the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "atn")]
    Attention,
    #[serde(rename = "emb")]
    Embedding,
    #[serde(rename = "comb")]
    Combined,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Attention => "atn",
            LossMode::Embedding => "emb",
            LossMode::Combined => "comb",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atn" => Ok(LossMode::Attention),
            "emb" => Ok(LossMode::Embedding),
            "comb" => Ok(LossMode::Combined),
            other => Err(format!("unknown loss mode `{other}` (expected atn|emb|comb)")),
        }
    }
}

/// Attention layer whose matrices are attacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetLayer {
    #[default]
    Last,
    /// 1-based layer index.
    #[serde(untagged)]
    Index(usize),
}

impl TargetLayer {
    /// 0-based layer index for a model with `num_layers` layers.
    pub fn resolve(&self, num_layers: usize) -> Result<usize, AttackError> {
        match *self {
            TargetLayer::Last => Ok(num_layers - 1),
            TargetLayer::Index(i) => {
                if i == 0 || i > num_layers {
                    Err(AttackError::InvalidConfig(format!(
                        "target layer {i} out of range 1..={num_layers}"
                    )))
                } else {
                    Ok(i - 1)
                }
            }
        }
    }
}

impl std::str::FromStr for TargetLayer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "last" {
            return Ok(TargetLayer::Last);
        }
        s.parse::<usize>()
            .map(TargetLayer::Index)
            .map_err(|_| format!("target layer must be `last` or a 1-based index, got `{s}`"))
    }
}

fn default_eta() -> f64 {
    0.01
}
fn default_iterations() -> usize {
    250
}
fn default_alpha() -> f64 {
    1.0
}
fn default_loss_mode() -> LossMode {
    LossMode::Combined
}

/// Attack budget, schedule and objective selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget in [0,1] pixel units (e.g. 8/255).
    pub epsilon: f64,
    /// Adam learning rate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub target_layer: TargetLayer,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seed for the optional random start.
    #[serde(default)]
    pub seed: u64,
    /// Start from uniform noise in [−ε, ε] instead of zero.
    #[serde(default)]
    pub random_init: bool,
    #[serde(default)]
    pub adam: AdamParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            eta: 0.01,
            iterations: 250,
            loss_mode: LossMode::Combined,
            target_layer: TargetLayer::Last,
            alpha: 1.0,
            seed: 0,
            random_init: false,
            adam: AdamParams::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon must be finite and ≥ 0, got {}",
                self.epsilon
            )));
        }
        if !(self.eta > 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidConfig("iterations must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Perturbation and optimizer moments during one attack.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub z: Vec<f64>,
    pub adam: AdamState,
}

impl PerturbationState {
    pub fn new(len: usize) -> Self {
        Self {
            z: vec![0.0; len],
            adam: AdamState::new(len),
        }
    }
}

/// One iteration of diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_atn: f64,
    pub l_emb: f64,
    pub l_comb: f64,
    pub beta: f64,
}

/// Outcome of an attack run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Optimized perturbation; ‖z*‖∞ ≤ ε and image + z* stays in [0,1].
    pub z_star: Tensor,
    /// One row per iteration.
    pub trace: Vec<TraceRow>,
    /// ‖E_clean − E(x+z*)‖₂ after the final projection.
    pub final_embedding_distance: f64,
    /// Attention alignment between the clean and final perturbed pass.
    pub final_attention_overlap: f64,
}

/// Alignment between a clean and a perturbed attention stack of one layer:
/// sum over heads of the mean elementwise product over the submatrix that
/// excludes the CLS row and column. Zero exactly when the supports are
/// disjoint there. The clean side is detached; no gradient flows into it.
pub fn attention_loss(
    tape: &mut Tape,
    clean: &[Tensor],
    adv: &[Tensor],
) -> Result<Tensor, AttackError> {
    if clean.len() != adv.len() {
        return Err(AttackError::Arg(format!(
            "head count mismatch: {} vs {}",
            clean.len(),
            adv.len()
        )));
    }
    if clean.is_empty() {
        return Err(AttackError::Arg("attention stacks are empty".into()));
    }
    let n = match clean[0].shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(AttackError::Arg(format!(
                "attention matrices must be square, got {other:?}"
            )))
        }
    };
    if n < 2 {
        return Err(AttackError::Arg(
            "attention loss needs at least two tokens (CLS excluded)".into(),
        ));
    }
    let sub = n - 1;
    let mut total: Option<Tensor> = None;
    for (g, a) in clean.iter().zip(adv) {
        if g.shape() != a.shape() || g.shape() != clean[0].shape() {
            return Err(AttackError::Arg(format!(
                "attention shape mismatch: {:?} vs {:?}",
                g.shape(),
                a.shape()
            )));
        }
        let g_rows = tape.slice_rows(&g.detach(), 1, sub)?;
        let g_sub = tape.slice_cols(&g_rows, 1, sub)?;
        let a_rows = tape.slice_rows(a, 1, sub)?;
        let a_sub = tape.slice_cols(&a_rows, 1, sub)?;
        let prod = tape.mul(&a_sub, &g_sub)?;
        let s = tape.sum(&prod, None)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    let total = total.expect("at least one head");
    Ok(tape.scale(&total, 1.0 / (sub * sub) as f64))
}

/// Euclidean distance between clean and perturbed embeddings. The clean side
/// is detached.
pub fn embedding_loss(
    tape: &mut Tape,
    clean: &Tensor,
    adv: &Tensor,
) -> Result<Tensor, AttackError> {
    if clean.len() != adv.len() {
        return Err(AttackError::Arg(format!(
            "embedding length mismatch: {} vs {}",
            clean.len(),
            adv.len()
        )));
    }
    let diff = tape.sub(adv, &clean.detach())?;
    Ok(tape.l2_norm(&diff, None)?)
}

/// Balance factor and combined diagnostic value for one iteration.
///
/// β equalizes the magnitudes of the two terms: β = α·|L_atn| / |L_emb|,
/// except that a degenerate |L_emb| ≤ 1e-12 yields β = 0 (pure attention
/// step). The combined value pairs the attention alignment with the *negated*
/// distance, matching what the optimizer minimizes.
pub fn combined_loss(l_atn: f64, l_emb: f64, alpha: f64) -> (f64, f64) {
    let beta = if l_emb.abs() > 1e-12 {
        alpha * l_atn.abs() / l_emb.abs()
    } else {
        0.0
    };
    let l_comb = alpha * l_atn - beta * l_emb;
    (l_comb, beta)
}

/// One Adam update of the perturbation.
pub fn adamw_step(state: &mut PerturbationState, grad: &[f64], cfg: &AttackConfig) {
    state.adam.step(&mut state.z, grad, cfg.eta, &cfg.adam);
}

/// Clamp the perturbation into the budget, then pull `image + z` back into
/// valid pixel range by adjusting z. Idempotent.
pub fn project(z: &mut [f64], epsilon: f64, image: &[f64]) {
    debug_assert_eq!(z.len(), image.len());
    for (zi, &xi) in z.iter_mut().zip(image) {
        let clamped = zi.clamp(-epsilon, epsilon);
        *zi = (xi + clamped).clamp(0.0, 1.0) - xi;
    }
}

/// Random ±ε sign noise projected into valid pixel range; the control
/// baseline reported next to every attacked metric.
pub fn sign_noise(image: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..image.len())
        .map(|_| if rng.gen::<bool>() { epsilon } else { -epsilon })
        .collect();
    project(&mut z, epsilon, image.values());
    Tensor::new(image.shape().to_vec(), z).expect("shape preserved")
}

/// Run the attack. See [`attack_observed`] for the observer variant.
pub fn attack(
    image: &Tensor,
    params: &ViTParams,
    model_cfg: &ViTConfig,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    attack_observed(image, params, model_cfg, cfg, |_, _| {})
}

/// Attack with a per-iteration observer called after each projection with
/// (iteration, z). Used by invariant tests; the observer cannot mutate state.
pub fn attack_observed(
    image: &Tensor,
    params: &ViTParams,
    model_cfg: &ViTConfig,
    cfg: &AttackConfig,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let layer = cfg.target_layer.resolve(model_cfg.num_layers)?;

    // Clean pass: cached attention and embedding are constants.
    let mut clean_tape = Tape::new();
    let clean = forward(&mut clean_tape, image, params, model_cfg, true)?;
    drop(clean_tape);
    let clean_heads: Vec<Tensor> = clean
        .attention
        .as_ref()
        .expect("attention requested")
        .layer(layer)
        .iter()
        .map(|t| t.detach())
        .collect();
    let clean_embedding = clean.embedding.detach();

    let mut state = PerturbationState::new(image.len());
    if cfg.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for zi in &mut state.z {
            *zi = rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
    }
    project(&mut state.z, cfg.epsilon, image.values());

    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(image.shape().to_vec(), state.z.clone())?);
        let x_adv = tape.add(&z, image)?;
        let out = forward(&mut tape, &x_adv, params, model_cfg, true)?;
        let adv_heads = out.attention.as_ref().expect("attention requested").layer(layer);

        let l_atn_t = attention_loss(&mut tape, &clean_heads, adv_heads)?;
        let l_emb_t = embedding_loss(&mut tape, &clean_embedding, &out.embedding)?;
        let l_atn = l_atn_t.item();
        let l_emb = l_emb_t.item();
        let (l_comb, beta) = combined_loss(l_atn, l_emb, cfg.alpha);
        if !l_atn.is_finite() || !l_emb.is_finite() || !l_comb.is_finite() {
            return Err(AttackError::NonFiniteLoss { iteration });
        }

        // Degenerate iterations (|L_emb| ≤ 1e-12, i.e. the perturbed pass
        // still sits at the clean embedding, in particular the very first
        // step from z = 0): the distance gradient there is defined as zero,
        // so an embedding step cannot move. Such iterations fall back to a
        // pure attention step; β = 0 encodes the same rule in combined mode.
        let emb_degenerate = l_emb.abs() <= 1e-12;
        let objective = match cfg.loss_mode {
            LossMode::Attention => tape.scale(&l_atn_t, cfg.alpha),
            LossMode::Embedding if emb_degenerate => tape.scale(&l_atn_t, cfg.alpha),
            LossMode::Embedding => tape.scale(&l_emb_t, -1.0),
            LossMode::Combined => {
                let atn_term = tape.scale(&l_atn_t, cfg.alpha);
                let emb_term = tape.scale(&l_emb_t, -beta);
                tape.add(&atn_term, &emb_term)?
            }
        };

        let grads = tape.backward(&objective)?;
        let grad = grads.wrt(&z).expect("z is a leaf");
        adamw_step(&mut state, grad.values(), cfg);
        project(&mut state.z, cfg.epsilon, image.values());

        debug_assert!(state.z.iter().all(|v| v.abs() <= cfg.epsilon + 1e-12));
        observer(iteration, &state.z);
        trace.push(TraceRow {
            iteration,
            l_atn,
            l_emb,
            l_comb,
            beta,
        });
    }

    // Final diagnostics on the projected perturbation.
    let z_star = Tensor::new(image.shape().to_vec(), state.z)?;
    let mut tape = Tape::new();
    let x_final = tape.add(&z_star, image)?;
    let final_out = forward(&mut tape, &x_final, params, model_cfg, true)?;
    let final_heads = final_out
        .attention
        .as_ref()
        .expect("attention requested")
        .layer(layer);
    let overlap = attention_loss(&mut tape, &clean_heads, final_heads)?.item();
    let distance = embedding_loss(&mut tape, &clean_embedding, &final_out.embedding)?.item();

    Ok(AttackResult {
        z_star,
        trace,
        final_embedding_distance: distance,
        final_attention_overlap: overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    fn uniform_stack(heads: usize, tokens: usize) -> Vec<Tensor> {
        (0..heads)
            .map(|_| Tensor::filled(vec![tokens, tokens], 1.0 / tokens as f64))
            .collect()
    }

    #[test]
    fn attention_loss_uniform_closed_form_exact() {
        // Uniform attention gives heads / tokens², bit-exactly for 2 heads
        // and 3 tokens.
        let mut tape = Tape::new();
        let gt = uniform_stack(2, 3);
        let adv = uniform_stack(2, 3);
        let loss = attention_loss(&mut tape, &gt, &adv).unwrap();
        assert_eq!(loss.item(), 2.0 / 9.0);
    }

    #[test]
    fn attention_loss_orthogonal_supports_are_zero() {
        // Rows one-hot at column 1 vs column 2 (inside the non-CLS block).
        let n = 3;
        let mut gt_vals = vec![0.0; n * n];
        let mut adv_vals = vec![0.0; n * n];
        for r in 0..n {
            gt_vals[r * n + 1] = 1.0;
            adv_vals[r * n + 2] = 1.0;
        }
        let gt = vec![Tensor::new(vec![n, n], gt_vals).unwrap()];
        let adv = vec![Tensor::new(vec![n, n], adv_vals).unwrap()];
        let mut tape = Tape::new();
        let loss = attention_loss(&mut tape, &gt, &adv).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn attention_loss_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (heads, n) = (4, 17);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor> {
            (0..heads)
                .map(|_| {
                    let mut vals = vec![0.0; n * n];
                    for row in vals.chunks_mut(n) {
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = rng.gen_range(0.0..1.0);
                            sum += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= sum;
                        }
                    }
                    Tensor::new(vec![n, n], vals).unwrap()
                })
                .collect()
        };
        for _ in 0..5 {
            let gt = mk(&mut rng);
            let adv = mk(&mut rng);
            let mut tape = Tape::new();
            let loss = attention_loss(&mut tape, &gt, &adv).unwrap().item();

            // Independent naive summation, straight from the definition.
            let mut oracle = 0.0;
            for h in 0..heads {
                let g = gt[h].values();
                let a = adv[h].values();
                let mut acc = 0.0;
                for r in 1..n {
                    for c in 1..n {
                        acc += g[r * n + c] * a[r * n + c];
                    }
                }
                oracle += acc / ((n - 1) * (n - 1)) as f64;
            }
            assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
        }
    }

    #[test]
    fn embedding_loss_examples() {
        let mut tape = Tape::new();
        let e = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        assert_eq!(embedding_loss(&mut tape, &e, &e).unwrap().item(), 0.0);

        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let d = embedding_loss(&mut tape, &a, &b).unwrap().item();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn embedding_loss_matches_sum_of_squares_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let oracle = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let mut tape = Tape::new();
            let ta = Tensor::new(vec![64], a).unwrap();
            let tb = Tensor::new(vec![64], b).unwrap();
            let d = embedding_loss(&mut tape, &ta, &tb).unwrap().item();
            assert!((d - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_loss_balancing() {
        let (_, beta) = combined_loss(0.5, 2.0, 1.0);
        assert_eq!(beta, 0.25);
        let (_, beta_zero) = combined_loss(0.0, 3.0, 1.0);
        assert_eq!(beta_zero, 0.0);
        let (_, beta_guard) = combined_loss(1.0, 1e-15, 1.0);
        assert_eq!(beta_guard, 0.0);
        // Balanced magnitudes whenever the guard does not trip.
        let (_, b) = combined_loss(0.7, -1.3, 2.0);
        assert!((2.0 * 0.7 - (b * 1.3)).abs() < 1e-12);
    }

    #[test]
    fn project_clamps_and_respects_pixel_range() {
        let eps = 8.0 / 255.0;
        let image = vec![0.5, 0.5];
        let mut z = vec![0.05, -0.02];
        project(&mut z, eps, &image);
        assert!((z[0] - eps).abs() < 1e-15);
        assert!((z[1] + 0.02).abs() < 1e-15);

        // A saturated pixel forces the positive budget to zero.
        let image = vec![1.0];
        let mut z = vec![eps];
        project(&mut z, eps, &image);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn project_is_idempotent() {
        let eps = 0.1;
        let image: Vec<f64> = vec![0.0, 0.02, 0.5, 0.97, 1.0];
        let mut z = vec![0.3, -0.3, 0.07, 0.2, -0.5];
        project(&mut z, eps, &image);
        let once = z.clone();
        project(&mut z, eps, &image);
        assert_eq!(z, once);
    }

    #[test]
    fn zero_budget_attack_returns_zero_perturbation() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: None,
            ..ViTConfig::default()
        };
        let params = init_params(&cfg, 4).unwrap();
        let image = Tensor::filled(cfg.image_shape(), 0.5);
        let acfg = AttackConfig {
            epsilon: 0.0,
            iterations: 3,
            ..AttackConfig::default()
        };
        let result = attack(&image, &params, &cfg, &acfg).unwrap();
        assert!(result.z_star.values().iter().all(|&v| v == 0.0));
        assert_eq!(result.final_embedding_distance, 0.0);
        assert_eq!(result.trace.len(), 3);
    }

    #[test]
    fn attack_is_deterministic() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: None,
            ..ViTConfig::default()
        };
        let params = init_params(&cfg, 4).unwrap();
        let image = Tensor::new(
            cfg.image_shape(),
            (0..64).map(|i| (i % 5) as f64 / 5.0).collect(),
        )
        .unwrap();
        let acfg = AttackConfig {
            iterations: 5,
            ..AttackConfig::default()
        };
        let a = attack(&image, &params, &cfg, &acfg).unwrap();
        let b = attack(&image, &params, &cfg, &acfg).unwrap();
        assert_eq!(a.z_star, b.z_star);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn trace_satisfies_balance_invariant() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: None,
            ..ViTConfig::default()
        };
        let params = init_params(&cfg, 12).unwrap();
        let image = Tensor::new(
            cfg.image_shape(),
            (0..64).map(|i| ((i * 13) % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let acfg = AttackConfig {
            iterations: 10,
            ..AttackConfig::default()
        };
        let result = attack(&image, &params, &cfg, &acfg).unwrap();
        for row in &result.trace {
            if row.l_emb.abs() > 1e-12 {
                let lhs = (1.0 * row.l_atn).abs();
                let rhs = (row.beta * row.l_emb).abs();
                let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
                assert!(rel < 1e-9, "iteration {}: {lhs} vs {rhs}", row.iteration);
            }
        }
    }

    #[test]
    fn sign_noise_is_within_budget_and_deterministic() {
        let image = Tensor::new(vec![1, 2, 2], vec![0.0, 0.5, 0.99, 1.0]).unwrap();
        let eps = 8.0 / 255.0;
        let a = sign_noise(&image, eps, 7);
        let b = sign_noise(&image, eps, 7);
        assert_eq!(a, b);
        for (zi, xi) in a.values().iter().zip(image.values()) {
            assert!(zi.abs() <= eps + 1e-12);
            let px = xi + zi;
            assert!((0.0..=1.0).contains(&px));
        }
    }
}
