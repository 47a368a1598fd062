//! Central finite-difference gradient checking.
//!
//! Every differentiable op in this crate is validated against the two-sided
//! difference (f(x+h) − f(x−h)) / 2h. The comparison is relative with a small
//! absolute floor so near-zero gradients do not blow up the quotient while
//! still being resolved well above finite-difference noise.

/// Default step for f64 central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerically differentiate a scalar function of a flat vector.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between one analytic and one numeric component.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Largest componentwise [`rel_err`] between two gradients.
///
/// Panics when the lengths differ — that is a harness bug, not a tolerance
/// failure.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{attention_loss, combined_loss, embedding_loss};
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward, init_params, ViTConfig};

/// Result of checking one op against central differences.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Scalar-valued wrapper: builds a loss from a flat input vector through one
/// op, contracted with a fixed random projection so the full Jacobian is
/// exercised.
type LossBuilder = Box<dyn Fn(&mut Tape, &Tensor) -> Tensor>;

fn project_loss(tape: &mut Tape, out: &Tensor, weights: &Tensor) -> Tensor {
    let weighted = tape.mul(out, weights).expect("projection shape");
    tape.sum(&weighted, None).expect("sum")
}

/// View a contiguous range of a flat vector as a tensor of `shape`, so one
/// flat probe vector can carry several op inputs at once.
fn slice_to_shape(tape: &mut Tape, x: &Tensor, offset: usize, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let idx: Vec<usize> = (offset..offset + n).collect();
    tape.gather(x, Arc::new(idx), shape).expect("flat slice")
}

fn check_case(x0: &[f64], build: &LossBuilder) -> f64 {
    // Analytic gradient via the tape.
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(vec![x0.len()], x0.to_vec()).expect("flat input"));
    let loss = build(&mut tape, &leaf);
    let grads = tape.backward(&loss).expect("backward");
    let analytic = grads.wrt(&leaf).expect("leaf gradient").values().to_vec();

    // Numeric gradient by rebuilding the forward on perturbed constants.
    let numeric = central_diff(
        |xs| {
            let mut tape = Tape::new();
            let t = Tensor::new(vec![xs.len()], xs.to_vec()).expect("flat input");
            build(&mut tape, &t).item()
        },
        x0,
        DEFAULT_STEP,
    );
    max_rel_err(&analytic, &numeric)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Run `cases` random central-difference checks for every differentiable op,
/// returning the worst relative error per op.
pub fn check_tensor_ops(cases: usize, seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // Each entry: op name + per-case generator of (flat input, loss builder).
    let mut run =
        |name: &'static str,
         rng: &mut ChaCha8Rng,
         gen: &mut dyn FnMut(&mut ChaCha8Rng) -> (Vec<f64>, LossBuilder)| {
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                let (x0, build) = gen(rng);
                worst = worst.max(check_case(&x0, &build));
            }
            results.push(OpCheck {
                name,
                cases,
                max_rel_err: worst,
            });
        };

    run("matmul", &mut rng, &mut |rng| {
        let (m, k, n) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let x0 = rand_vec(rng, m * k + k * n, -1.5, 1.5);
        let w = Tensor::new(vec![m, n], rand_vec(rng, m * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = slice_to_shape(tape, x, 0, vec![m, k]);
            let b = slice_to_shape(tape, x, m * k, vec![k, n]);
            let out = tape.matmul(&a, &b).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("transpose", &mut rng, &mut |rng| {
        let (m, n) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
        let x0 = rand_vec(rng, m * n, -2.0, 2.0);
        let w = Tensor::new(vec![n, m], rand_vec(rng, m * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = tape.reshape(x, vec![m, n]).unwrap();
            let out = tape.transpose(&a).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("softmax_rows", &mut rng, &mut |rng| {
        let (m, n) = (rng.gen_range(1..4usize), rng.gen_range(2..6usize));
        let x0 = rand_vec(rng, m * n, -2.0, 2.0);
        let w = Tensor::new(vec![m, n], rand_vec(rng, m * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = tape.reshape(x, vec![m, n]).unwrap();
            let out = tape.softmax_rows(&a).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("layer_norm", &mut rng, &mut |rng| {
        let (m, d) = (rng.gen_range(1..4usize), rng.gen_range(2..6usize));
        // Input rows, then gain, then bias, all differentiated at once.
        let mut x0 = rand_vec(rng, m * d, -2.0, 2.0);
        x0.extend(rand_vec(rng, d, 0.5, 1.5));
        x0.extend(rand_vec(rng, d, -0.5, 0.5));
        let w = Tensor::new(vec![m, d], rand_vec(rng, m * d, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let rows = slice_to_shape(tape, x, 0, vec![m, d]);
            let gain = slice_to_shape(tape, x, m * d, vec![d]);
            let bias = slice_to_shape(tape, x, m * d + d, vec![d]);
            let out = tape.layer_norm(&rows, &gain, &bias, 1e-5).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    for (name, kind) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
        run(name, &mut rng, &mut |rng| {
            let n = rng.gen_range(1..8usize);
            let x0 = rand_vec(rng, 2 * n, -2.0, 2.0);
            let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
            let build: LossBuilder = Box::new(move |tape, x| {
                let a = slice_to_shape(tape, x, 0, vec![n]);
                let b = slice_to_shape(tape, x, n, vec![n]);
                let out = match kind {
                    0 => tape.add(&a, &b).unwrap(),
                    1 => tape.sub(&a, &b).unwrap(),
                    _ => tape.mul(&a, &b).unwrap(),
                };
                project_loss(tape, &out, &w)
            });
            (x0, build)
        });
    }

    run("add_scalar", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..8usize);
        let c = rng.gen_range(-2.0..2.0);
        let x0 = rand_vec(rng, n, -2.0, 2.0);
        let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.add_scalar(x, c);
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("scale", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..8usize);
        let c = rng.gen_range(-3.0..3.0);
        let x0 = rand_vec(rng, n, -2.0, 2.0);
        let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.scale(x, c);
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("gelu", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..8usize);
        let x0 = rand_vec(rng, n, -3.0, 3.0);
        let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.gelu(x);
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("square", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..8usize);
        let x0 = rand_vec(rng, n, -2.0, 2.0);
        let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.square(x);
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("sqrt", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..8usize);
        // Stay away from the singular point at zero.
        let x0 = rand_vec(rng, n, 0.5, 3.0);
        let w = Tensor::new(vec![n], rand_vec(rng, n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.sqrt_elem(x);
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    for (name, kind) in [("sum", 0usize), ("mean", 1), ("l2norm", 2)] {
        run(name, &mut rng, &mut |rng| {
            let (m, n) = (rng.gen_range(1..4usize), rng.gen_range(1..5usize));
            // Bounded away from zero keeps the l2norm gradient well defined.
            let x0 = rand_vec(rng, m * n, 0.3, 2.0);
            let axis = rng.gen_range(0..3usize); // 0, 1, or all
            let build: LossBuilder = Box::new(move |tape, x| {
                let a = tape.reshape(x, vec![m, n]).unwrap();
                let axes: Option<&[usize]> = match axis {
                    0 => Some(&[0]),
                    1 => Some(&[1]),
                    _ => None,
                };
                let out = match kind {
                    0 => tape.sum(&a, axes).unwrap(),
                    1 => tape.mean(&a, axes).unwrap(),
                    _ => tape.l2_norm(&a, axes).unwrap(),
                };
                let w = Tensor::filled(out.shape().to_vec(), 1.0);
                project_loss(tape, &out, &w)
            });
            (x0, build)
        });
    }

    run("gather", &mut rng, &mut |rng| {
        let n = rng.gen_range(2..8usize);
        let k = rng.gen_range(1..10usize);
        let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
        let x0 = rand_vec(rng, n, -2.0, 2.0);
        let w = Tensor::new(vec![k], rand_vec(rng, k, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.gather(x, Arc::new(idx.clone()), vec![k]).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("slice_rows", &mut rng, &mut |rng| {
        let (m, n) = (rng.gen_range(2..5usize), rng.gen_range(1..4usize));
        let start = rng.gen_range(0..m - 1);
        let len = rng.gen_range(1..=m - start);
        let x0 = rand_vec(rng, m * n, -2.0, 2.0);
        let w = Tensor::new(vec![len, n], rand_vec(rng, len * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = tape.reshape(x, vec![m, n]).unwrap();
            let out = tape.slice_rows(&a, start, len).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("slice_cols", &mut rng, &mut |rng| {
        let (m, n) = (rng.gen_range(1..4usize), rng.gen_range(2..5usize));
        let start = rng.gen_range(0..n - 1);
        let len = rng.gen_range(1..=n - start);
        let x0 = rand_vec(rng, m * n, -2.0, 2.0);
        let w = Tensor::new(vec![m, len], rand_vec(rng, m * len, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = tape.reshape(x, vec![m, n]).unwrap();
            let out = tape.slice_cols(&a, start, len).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("concat_rows", &mut rng, &mut |rng| {
        let (m1, m2, n) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
        );
        let x0 = rand_vec(rng, (m1 + m2) * n, -2.0, 2.0);
        let w = Tensor::new(vec![m1 + m2, n], rand_vec(rng, (m1 + m2) * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = slice_to_shape(tape, x, 0, vec![m1, n]);
            let b = slice_to_shape(tape, x, m1 * n, vec![m2, n]);
            let out = tape.concat_rows(&[&a, &b]).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("concat_cols", &mut rng, &mut |rng| {
        let (m, n1, n2) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
        );
        let x0 = rand_vec(rng, m * (n1 + n2), -2.0, 2.0);
        let w = Tensor::new(vec![m, n1 + n2], rand_vec(rng, m * (n1 + n2), -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let a = slice_to_shape(tape, x, 0, vec![m, n1]);
            let b = slice_to_shape(tape, x, m * n1, vec![m, n2]);
            let out = tape.concat_cols(&[&a, &b]).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("repeat_rows", &mut rng, &mut |rng| {
        let (d, n) = (rng.gen_range(1..5usize), rng.gen_range(1..4usize));
        let x0 = rand_vec(rng, d, -2.0, 2.0);
        let w = Tensor::new(vec![n, d], rand_vec(rng, n * d, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.repeat_rows(x, n).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("reshape", &mut rng, &mut |rng| {
        let (m, n) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let x0 = rand_vec(rng, m * n, -2.0, 2.0);
        let w = Tensor::new(vec![m, n], rand_vec(rng, m * n, -1.0, 1.0)).unwrap();
        let build: LossBuilder = Box::new(move |tape, x| {
            let out = tape.reshape(x, vec![m, n]).unwrap();
            project_loss(tape, &out, &w)
        });
        (x0, build)
    });

    run("cross_entropy", &mut rng, &mut |rng| {
        let (n, c) = (rng.gen_range(1..4usize), rng.gen_range(2..5usize));
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let x0 = rand_vec(rng, n * c, -2.0, 2.0);
        let build: LossBuilder = Box::new(move |tape, x| {
            let logits = tape.reshape(x, vec![n, c]).unwrap();
            tape.cross_entropy_mean(&logits, Arc::new(targets.clone()))
                .unwrap()
        });
        (x0, build)
    });

    results
}

/// Finite-difference check of the whole model: the combined objective (with
/// the balance factor frozen at the base point) differentiated with respect
/// to the perturbation and every parameter tensor.
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub input_rel_err: f64,
    pub param_rel_err: f64,
    pub params_checked: usize,
    pub coords_checked: usize,
}

/// Small config for whole-model checks: 2 layers, 2 heads, a 3×3 patch grid
/// plus CLS (10 tokens).
pub fn tiny_check_config() -> ViTConfig {
    ViTConfig {
        image_size: 12,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 2,
        num_classes: None,
        layer_norm_eps: 1e-5,
    }
}

pub fn check_model_gradients(cfg: &ViTConfig, seed: u64) -> ModelCheck {
    // Fresh init weights leave layer-norm inputs nearly constant, which blows
    // up third derivatives (1/σ³ factors) and with them the h² truncation
    // error of central differences. Rescaling to trained-like activation
    // magnitudes keeps the check well conditioned at the documented step.
    let mut params = init_params(cfg, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with(".weight") {
            let scaled: Vec<f64> = t.values().iter().map(|v| v * 12.0).collect();
            *t = Tensor::new(t.shape().to_vec(), scaled).expect("same shape");
        }
    }
    params.pos_embed = Tensor::new(
        params.pos_embed.shape().to_vec(),
        (0..params.pos_embed.len())
            .map(|_| rng.gen_range(-0.3..0.3))
            .collect(),
    )
    .expect("pos shape");
    params.cls_token = Tensor::new(
        params.cls_token.shape().to_vec(),
        (0..params.cls_token.len())
            .map(|_| rng.gen_range(-0.3..0.3))
            .collect(),
    )
    .expect("cls shape");
    let pixels = cfg.channels * cfg.image_size * cfg.image_size;
    let image = Tensor::new(
        cfg.image_shape(),
        (0..pixels).map(|_| rng.gen_range(0.05..0.95)).collect(),
    )
    .expect("image shape");
    // A mid-attack-sized perturbation keeps ‖E_gt − E_adv‖ well away from the
    // non-smooth origin of the distance term, where the balance factor would
    // explode and finite differences lose conditioning.
    let z0: Vec<f64> = (0..pixels).map(|_| rng.gen_range(-0.05..0.05)).collect();

    // Clean activations are constants throughout.
    let mut clean_tape = Tape::new();
    let clean = forward(&mut clean_tape, &image, &params, cfg, true).expect("clean pass");
    let layer = cfg.num_layers - 1;
    let clean_heads: Vec<Tensor> = clean
        .attention
        .as_ref()
        .unwrap()
        .layer(layer)
        .iter()
        .map(|t| t.detach())
        .collect();
    let clean_emb = clean.embedding.detach();

    // Freeze the balance factor at the base point, as the optimizer does.
    let objective_value = |z: &[f64], p: &crate::vit::ViTParams, beta: Option<f64>| -> (f64, f64) {
        let mut tape = Tape::new();
        let zt = Tensor::new(cfg.image_shape(), z.to_vec()).unwrap();
        let x = tape.add(&zt, &image).unwrap();
        let out = forward(&mut tape, &x, p, cfg, true).expect("forward");
        let heads = out.attention.as_ref().unwrap().layer(layer);
        let l_atn = attention_loss(&mut tape, &clean_heads, heads).unwrap().item();
        let l_emb = embedding_loss(&mut tape, &clean_emb, &out.embedding)
            .unwrap()
            .item();
        let b = beta.unwrap_or_else(|| combined_loss(l_atn, l_emb, 1.0).1);
        (l_atn - b * l_emb, b)
    };
    let (_, beta) = objective_value(&z0, &params, None);

    // Analytic gradients: track z and every parameter on one tape.
    let mut tape = Tape::new();
    let z_leaf = tape.leaf(Tensor::new(cfg.image_shape(), z0.clone()).unwrap());
    let tracked = params.tracked(&mut tape);
    let x = tape.add(&z_leaf, &image).unwrap();
    let out = forward(&mut tape, &x, &tracked, cfg, true).expect("forward");
    let heads = out.attention.as_ref().unwrap().layer(layer);
    let l_atn_t = attention_loss(&mut tape, &clean_heads, heads).unwrap();
    let l_emb_t = embedding_loss(&mut tape, &clean_emb, &out.embedding).unwrap();
    let neg = tape.scale(&l_emb_t, -beta);
    let objective = tape.add(&l_atn_t, &neg).unwrap();
    let tracked_named: Vec<(String, Tensor)> = tracked
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let grads = tape.backward(&objective).expect("backward");

    // Input side.
    let analytic_z = grads.wrt(&z_leaf).unwrap().values().to_vec();
    let numeric_z = central_diff(
        |z| objective_value(z, &params, Some(beta)).0,
        &z0,
        DEFAULT_STEP,
    );
    let input_rel_err = max_rel_err(&analytic_z, &numeric_z);
    let mut coords = z0.len();

    // Parameter side: perturb each tensor in turn.
    let mut param_rel_err: f64 = 0.0;
    for (name, tracked_tensor) in &tracked_named {
        let analytic = match grads.wrt(tracked_tensor) {
            Some(g) => g.values().to_vec(),
            None => vec![0.0; tracked_tensor.len()],
        };
        let base = tracked_tensor.values().to_vec();
        let numeric = central_diff(
            |vals| {
                let mut perturbed = params.clone();
                for (pname, t) in perturbed.named_tensors_mut() {
                    if &pname == name {
                        *t = Tensor::new(t.shape().to_vec(), vals.to_vec()).unwrap();
                    }
                }
                objective_value(&z0, &perturbed, Some(beta)).0
            },
            &base,
            DEFAULT_STEP,
        );
        coords += base.len();
        param_rel_err = param_rel_err.max(max_rel_err(&analytic, &numeric));
    }

    ModelCheck {
        input_rel_err,
        param_rel_err,
        params_checked: tracked_named.len(),
        coords_checked: coords,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_square() {
        let g = central_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(0.0, 1e-12) < 1e-9);
        assert!(rel_err(1.0, 2.0) > 0.3);
    }
}
