//! Attack-success protocols.
//!
//! Every attacked metric is reported next to a random ±ε sign-noise control,
//! and every report carries a fingerprint of the fully-resolved configuration
//! that produced it. Per-image work is embarrassingly parallel; aggregation
//! is a sum of counts, so results do not depend on worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attack::{attack, sign_noise, AttackConfig, LossMode};
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward, ViTConfig, ViTParams};

use super::dataset::{Split, SyntheticDataset};
use super::{
    apply_perturbation, classify_logits, config_fingerprint, dense_token_predictions, EvalError,
};

/// One scalar metric with its sample count and config provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_fingerprint: String,
}

impl MetricReport {
    fn new(metric: impl Into<String>, value: f64, n: usize, fingerprint: &str) -> Self {
        Self {
            metric: metric.into(),
            value,
            n,
            config_fingerprint: fingerprint.to_string(),
        }
    }
}

fn mix_seed(base: u64, index: usize, tag: u64) -> u64 {
    let mut z = base ^ tag ^ ((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

// ── Classification ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub clean_accuracy: f64,
    pub n_scanned: usize,
    pub eligible: usize,
    pub flipped: usize,
    pub control_flipped: usize,
    pub asr: MetricReport,
    pub control_asr: MetricReport,
}

/// Attack success rate on the eligible set: only images classified correctly
/// when clean enter the denominator; success means the attacked image is
/// misclassified.
pub fn attack_success_rate_classification(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    max_eligible: usize,
    acfg: &AttackConfig,
) -> Result<ClassificationEval, EvalError> {
    if params.classifier.is_none() {
        return Err(EvalError::MissingHead("classifier"));
    }
    let total = data.len(Split::Val);
    let clean_ok: Vec<Result<bool, EvalError>> = (0..total)
        .into_par_iter()
        .map(|i| {
            let sample = data.sample(Split::Val, i);
            Ok(super::predict_class(cfg, params, &sample.image)? == sample.label)
        })
        .collect();
    let mut eligible_indices = Vec::new();
    let mut correct = 0usize;
    for (i, res) in clean_ok.into_iter().enumerate() {
        if res? {
            correct += 1;
            if eligible_indices.len() < max_eligible {
                eligible_indices.push(i);
            }
        }
    }
    if eligible_indices.is_empty() {
        return Err(EvalError::EmptyDenominator(
            "no clean-correct images to attack",
        ));
    }

    let outcomes: Vec<Result<(bool, bool), EvalError>> = eligible_indices
        .par_iter()
        .map(|&i| {
            let sample = data.sample(Split::Val, i);
            let result = attack(&sample.image, params, cfg, acfg)?;
            let adv = apply_perturbation(&sample.image, &result.z_star);
            let flipped = super::predict_class(cfg, params, &adv)? != sample.label;

            let noise = sign_noise(&sample.image, acfg.epsilon, mix_seed(acfg.seed, i, 0xC0));
            let noisy = apply_perturbation(&sample.image, &noise);
            let control_flipped = super::predict_class(cfg, params, &noisy)? != sample.label;
            Ok((flipped, control_flipped))
        })
        .collect();

    let mut flipped = 0usize;
    let mut control_flipped = 0usize;
    for o in outcomes {
        let (f, c) = o?;
        flipped += f as usize;
        control_flipped += c as usize;
    }
    let eligible = eligible_indices.len();
    let fp = config_fingerprint(&json!({
        "task": "classification",
        "model": cfg,
        "attack": acfg,
        "dataset": data.spec(),
        "max_eligible": max_eligible,
    }));
    Ok(ClassificationEval {
        clean_accuracy: correct as f64 / total as f64,
        n_scanned: total,
        eligible,
        flipped,
        control_flipped,
        asr: MetricReport::new("asr_classification", flipped as f64 / eligible as f64, eligible, &fp),
        control_asr: MetricReport::new(
            "asr_classification_control",
            control_flipped as f64 / eligible as f64,
            eligible,
            &fp,
        ),
    })
}

// ── Retrieval ───────────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction of queries whose true item is absent from the top-k gallery
/// entries under cosine similarity. Ties rank by gallery index.
pub fn success_at_k(
    gallery: &[Vec<f64>],
    queries: &[Vec<f64>],
    truth: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 || k > gallery.len() {
        return Err(EvalError::KTooLarge {
            k,
            gallery: gallery.len(),
        });
    }
    assert_eq!(queries.len(), truth.len(), "one truth index per query");
    let mut missed = 0usize;
    for (query, &true_item) in queries.iter().zip(truth) {
        let mut ranked: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (i, cosine(query, g)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        if !ranked[..k].iter().any(|&(i, _)| i == true_item) {
            missed += 1;
        }
    }
    Ok(missed as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub gallery_size: usize,
    pub success: Vec<MetricReport>,
    pub control_success: Vec<MetricReport>,
}

/// Gallery-attack retrieval: the gallery of clean embeddings is the target,
/// every gallery image is attacked and re-embedded, queries stay clean, and
/// query i's true item is gallery item i.
pub fn retrieval_success_at_k(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    gallery_size: usize,
    ks: &[usize],
    acfg: &AttackConfig,
) -> Result<RetrievalEval, EvalError> {
    if gallery_size == 0 || gallery_size > data.len(Split::Val) {
        return Err(EvalError::Config(format!(
            "gallery size {gallery_size} exceeds validation split {}",
            data.len(Split::Val)
        )));
    }
    for &k in ks {
        if k == 0 || k > gallery_size {
            return Err(EvalError::KTooLarge {
                k,
                gallery: gallery_size,
            });
        }
    }

    let embeddings: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>), EvalError>> = (0..gallery_size)
        .into_par_iter()
        .map(|i| {
            let sample = data.sample(Split::Val, i);
            let clean = super::embedding_of(cfg, params, &sample.image)?;
            let result = attack(&sample.image, params, cfg, acfg)?;
            let adv = apply_perturbation(&sample.image, &result.z_star);
            let attacked = super::embedding_of(cfg, params, &adv)?;
            let noise = sign_noise(&sample.image, acfg.epsilon, mix_seed(acfg.seed, i, 0xC1));
            let noisy = apply_perturbation(&sample.image, &noise);
            let control = super::embedding_of(cfg, params, &noisy)?;
            Ok((clean, attacked, control))
        })
        .collect();

    let mut clean_gallery = Vec::with_capacity(gallery_size);
    let mut attacked_gallery = Vec::with_capacity(gallery_size);
    let mut control_gallery = Vec::with_capacity(gallery_size);
    for e in embeddings {
        let (c, a, n) = e?;
        clean_gallery.push(c);
        attacked_gallery.push(a);
        control_gallery.push(n);
    }
    let truth: Vec<usize> = (0..gallery_size).collect();

    let fp = config_fingerprint(&json!({
        "task": "retrieval",
        "model": cfg,
        "attack": acfg,
        "dataset": data.spec(),
        "gallery_size": gallery_size,
        "ks": ks,
    }));
    let mut success = Vec::new();
    let mut control_success = Vec::new();
    for &k in ks {
        let s = success_at_k(&attacked_gallery, &clean_gallery, &truth, k)?;
        success.push(MetricReport::new(
            format!("retrieval_success_at_{k}"),
            s,
            gallery_size,
            &fp,
        ));
        let c = success_at_k(&control_gallery, &clean_gallery, &truth, k)?;
        control_success.push(MetricReport::new(
            format!("retrieval_success_at_{k}_control"),
            c,
            gallery_size,
            &fp,
        ));
    }
    Ok(RetrievalEval {
        gallery_size,
        success,
        control_success,
    })
}

// ── Dense per-token task ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenseMetrics {
    pub token_accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseEval {
    pub n_images: usize,
    pub clean: DenseMetrics,
    pub attacked: DenseMetrics,
    pub control: DenseMetrics,
    pub accuracy_drop: f64,
    pub reports: Vec<MetricReport>,
}

/// Mean IoU over the classes of a square confusion matrix (rows = truth,
/// columns = prediction); classes with an empty union are skipped.
pub fn miou_from_confusion<const C: usize>(confusion: &[[usize; C]; C]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..C {
        let tp = confusion[c][c];
        let row: usize = confusion[c].iter().sum();
        let col: usize = confusion.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        if union > 0 {
            total += tp as f64 / union as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn dense_pass(
    cfg: &ViTConfig,
    params: &ViTParams,
    image: &Tensor,
    truth: &[usize],
) -> Result<(usize, [[usize; 2]; 2]), EvalError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, image, params, cfg, false)?;
    let preds = dense_token_predictions(&mut tape, cfg, params, &out)?;
    let mut confusion = [[0usize; 2]; 2];
    let mut hits = 0usize;
    for (&p, &t) in preds.iter().zip(truth) {
        confusion[t][p] += 1;
        hits += (p == t) as usize;
    }
    Ok((hits, confusion))
}

fn add_confusion(acc: &mut [[usize; 2]; 2], one: &[[usize; 2]; 2]) {
    for t in 0..2 {
        for p in 0..2 {
            acc[t][p] += one[t][p];
        }
    }
}

/// Clean vs. attacked vs. control per-token accuracy and mean IoU.
pub fn dense_degradation(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    n_images: usize,
    acfg: &AttackConfig,
) -> Result<DenseEval, EvalError> {
    if params.dense.is_none() {
        return Err(EvalError::MissingHead("dense"));
    }
    let n = n_images.min(data.len(Split::Val));
    if n == 0 {
        return Err(EvalError::EmptyDenominator("dense evaluation needs images"));
    }

    type PerImage = ((usize, [[usize; 2]; 2]), (usize, [[usize; 2]; 2]), (usize, [[usize; 2]; 2]), usize);
    let passes: Vec<Result<PerImage, EvalError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = data.sample(Split::Val, i);
            let truth = data.token_labels(&sample, cfg.patch_size);
            let clean = dense_pass(cfg, params, &sample.image, &truth)?;

            let result = attack(&sample.image, params, cfg, acfg)?;
            let adv = apply_perturbation(&sample.image, &result.z_star);
            let attacked = dense_pass(cfg, params, &adv, &truth)?;

            let noise = sign_noise(&sample.image, acfg.epsilon, mix_seed(acfg.seed, i, 0xC2));
            let noisy = apply_perturbation(&sample.image, &noise);
            let control = dense_pass(cfg, params, &noisy, &truth)?;
            Ok((clean, attacked, control, truth.len()))
        })
        .collect();

    let mut tokens = 0usize;
    let mut hits = [0usize; 3];
    let mut confusion = [[[0usize; 2]; 2]; 3];
    for p in passes {
        let ((ch, cc), (ah, ac), (nh, nc), t) = p?;
        tokens += t;
        hits[0] += ch;
        hits[1] += ah;
        hits[2] += nh;
        add_confusion(&mut confusion[0], &cc);
        add_confusion(&mut confusion[1], &ac);
        add_confusion(&mut confusion[2], &nc);
    }

    let metrics = |slot: usize| DenseMetrics {
        token_accuracy: hits[slot] as f64 / tokens as f64,
        miou: miou_from_confusion(&confusion[slot]),
    };
    let clean = metrics(0);
    let attacked = metrics(1);
    let control = metrics(2);
    let fp = config_fingerprint(&json!({
        "task": "dense",
        "model": cfg,
        "attack": acfg,
        "dataset": data.spec(),
        "n_images": n,
    }));
    let reports = vec![
        MetricReport::new("dense_token_accuracy_clean", clean.token_accuracy, n, &fp),
        MetricReport::new("dense_token_accuracy_attacked", attacked.token_accuracy, n, &fp),
        MetricReport::new("dense_token_accuracy_control", control.token_accuracy, n, &fp),
        MetricReport::new("dense_miou_clean", clean.miou, n, &fp),
        MetricReport::new("dense_miou_attacked", attacked.miou, n, &fp),
        MetricReport::new("dense_miou_control", control.miou, n, &fp),
    ];
    Ok(DenseEval {
        n_images: n,
        clean,
        attacked,
        control,
        accuracy_drop: clean.token_accuracy - attacked.token_accuracy,
        reports,
    })
}

// ── Mode comparison ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompareSizes {
    pub classification_images: usize,
    pub gallery_size: usize,
    pub dense_images: usize,
}

impl Default for CompareSizes {
    fn default() -> Self {
        Self {
            classification_images: 16,
            gallery_size: 16,
            dense_images: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareCell {
    pub task: String,
    pub mode: String,
    /// Higher means more damage: ASR, success@1, or accuracy drop.
    pub degradation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
    /// Tasks (out of 3) where the combined mode matched or beat the weaker
    /// of the two single modes. Reported, not asserted: it is an empirical
    /// tendency.
    pub comb_at_least_min_tasks: usize,
    pub config_fingerprint: String,
}

impl CompareReport {
    pub fn cell(&self, task: &str, mode: &str) -> Option<&CompareCell> {
        self.cells.iter().find(|c| c.task == task && c.mode == mode)
    }
}

/// 3 tasks × 3 loss modes grid of degradation metrics.
pub fn mode_comparison_report(
    cfg: &ViTConfig,
    params: &ViTParams,
    data: &SyntheticDataset,
    sizes: &CompareSizes,
    base: &AttackConfig,
) -> Result<CompareReport, EvalError> {
    let modes = [LossMode::Attention, LossMode::Embedding, LossMode::Combined];
    let mut cells = Vec::with_capacity(9);
    for mode in modes {
        let acfg = AttackConfig {
            loss_mode: mode,
            ..base.clone()
        };
        let cls = attack_success_rate_classification(
            cfg,
            params,
            data,
            sizes.classification_images,
            &acfg,
        )?;
        cells.push(CompareCell {
            task: "classification".into(),
            mode: mode.as_str().into(),
            degradation: cls.asr.value,
        });
        let ret = retrieval_success_at_k(cfg, params, data, sizes.gallery_size, &[1], &acfg)?;
        cells.push(CompareCell {
            task: "retrieval".into(),
            mode: mode.as_str().into(),
            degradation: ret.success[0].value,
        });
        let dense = dense_degradation(cfg, params, data, sizes.dense_images, &acfg)?;
        cells.push(CompareCell {
            task: "dense".into(),
            mode: mode.as_str().into(),
            degradation: dense.accuracy_drop,
        });
    }

    let mut comb_at_least_min_tasks = 0;
    for task in ["classification", "retrieval", "dense"] {
        let value = |mode: &str| {
            cells
                .iter()
                .find(|c| c.task == task && c.mode == mode)
                .map(|c| c.degradation)
                .unwrap_or(f64::NAN)
        };
        if value("comb") >= value("atn").min(value("emb")) - 1e-12 {
            comb_at_least_min_tasks += 1;
        }
    }
    let config_fingerprint = config_fingerprint(&json!({
        "task": "compare",
        "model": cfg,
        "attack": base,
        "dataset": data.spec(),
        "sizes": sizes,
    }));
    Ok(CompareReport {
        cells,
        comb_at_least_min_tasks,
        config_fingerprint,
    })
}

// ── Transfer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    /// asr[source][target]; the diagonal is the white-box rate.
    pub asr: Vec<Vec<f64>>,
    pub eligible_per_target: Vec<usize>,
    pub config_fingerprint: String,
}

/// Cross-model attack success: perturbations crafted on each source model,
/// evaluated on every target's clean-correct images.
pub fn transfer_matrix(
    models: &[(ViTConfig, ViTParams)],
    data: &SyntheticDataset,
    max_eligible: usize,
    acfg: &AttackConfig,
) -> Result<TransferReport, EvalError> {
    if models.len() < 2 {
        return Err(EvalError::Config(
            "transfer needs at least two models".into(),
        ));
    }
    let (cfg0, _) = &models[0];
    for (cfg, _) in models.iter().skip(1) {
        if cfg.image_size != cfg0.image_size || cfg.channels != cfg0.channels {
            return Err(EvalError::ConfigMismatch(format!(
                "image shape {}x{}x{} vs {}x{}x{}",
                cfg.channels, cfg.image_size, cfg.image_size,
                cfg0.channels, cfg0.image_size, cfg0.image_size
            )));
        }
    }

    // Eligible sets per target: first clean-correct validation images.
    let total = data.len(Split::Val);
    let mut eligible: Vec<Vec<usize>> = Vec::with_capacity(models.len());
    for (cfg, params) in models {
        let ok: Vec<Result<bool, EvalError>> = (0..total)
            .into_par_iter()
            .map(|i| {
                let sample = data.sample(Split::Val, i);
                Ok(super::predict_class(cfg, params, &sample.image)? == sample.label)
            })
            .collect();
        let mut list = Vec::new();
        for (i, r) in ok.into_iter().enumerate() {
            if r? && list.len() < max_eligible {
                list.push(i);
            }
        }
        if list.is_empty() {
            return Err(EvalError::EmptyDenominator(
                "a target model classifies nothing correctly",
            ));
        }
        eligible.push(list);
    }

    // Craft once per (source, image) over the union of eligible indices.
    let mut union: Vec<usize> = eligible.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();

    let mut asr = vec![vec![0.0; models.len()]; models.len()];
    for (s, (scfg, sparams)) in models.iter().enumerate() {
        let crafted: Vec<Result<(usize, Tensor), EvalError>> = union
            .par_iter()
            .map(|&i| {
                let sample = data.sample(Split::Val, i);
                let result = attack(&sample.image, sparams, scfg, acfg)?;
                Ok((i, result.z_star))
            })
            .collect();
        let mut z_by_index = std::collections::BTreeMap::new();
        for c in crafted {
            let (i, z) = c?;
            z_by_index.insert(i, z);
        }
        for (t, (tcfg, tparams)) in models.iter().enumerate() {
            let flips: Vec<Result<bool, EvalError>> = eligible[t]
                .par_iter()
                .map(|&i| {
                    let sample = data.sample(Split::Val, i);
                    let adv = apply_perturbation(&sample.image, &z_by_index[&i]);
                    Ok(super::predict_class(tcfg, tparams, &adv)? != sample.label)
                })
                .collect();
            let mut flipped = 0usize;
            for f in flips {
                flipped += f? as usize;
            }
            asr[s][t] = flipped as f64 / eligible[t].len() as f64;
        }
    }

    let config_fingerprint = config_fingerprint(&json!({
        "task": "transfer",
        "models": models.iter().map(|(c, _)| c).collect::<Vec<_>>(),
        "attack": acfg,
        "dataset": data.spec(),
        "max_eligible": max_eligible,
    }));
    Ok(TransferReport {
        asr,
        eligible_per_target: eligible.iter().map(|e| e.len()).collect(),
        config_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_at_k_forced_ranking() {
        // Two orthogonal embeddings; negating the true item's gallery entry
        // drops it to the bottom.
        let clean = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let negated = vec![vec![-1.0, 0.0], vec![0.0, 1.0]];
        let truth = vec![0, 1];
        // Identity gallery: nothing missed.
        assert_eq!(success_at_k(&clean, &clean, &truth, 1).unwrap(), 0.0);
        // Query 0's item now ranks last.
        assert_eq!(success_at_k(&negated, &clean, &truth, 1).unwrap(), 0.5);
        // k covering the whole gallery can never miss.
        assert_eq!(success_at_k(&negated, &clean, &truth, 2).unwrap(), 0.0);
        assert!(matches!(
            success_at_k(&clean, &clean, &truth, 3),
            Err(EvalError::KTooLarge { .. })
        ));
    }

    #[test]
    fn asr_ratio_arithmetic() {
        // 100 eligible, 97 flipped → 0.97.
        assert_eq!(97f64 / 100f64, 0.97);
    }

    #[test]
    fn miou_degenerate_all_one_class() {
        // Balanced truth (half background, half foreground), prediction all
        // foreground: IoU is 0 for background and 1/2 for foreground, so the
        // mean is 1/4.
        let confusion = [[0usize, 50], [0, 50]];
        assert_eq!(miou_from_confusion(&confusion), 0.25);
    }

    #[test]
    fn miou_perfect_prediction_is_one() {
        let confusion = [[30usize, 0], [0, 70]];
        assert_eq!(miou_from_confusion(&confusion), 1.0);
    }

    #[test]
    fn cosine_zero_guard() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
