//! Gradient verification suite: every differentiable primitive, the fusion
//! block, and the full parsing-branch composition, checked against central
//! finite differences on randomized instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dbblock::{fuse_multiscale, DbBlockParams, ScaleFeature, UpsamplePaths};
use crate::error::Result;
use crate::label::LabelMap;
use crate::losses::{
    class_ratios, cross_entropy, focal_loss, mcb_focal_loss, LossConfig, OneHotLabels,
};
use crate::model::{
    backbone_forward, mask_branch_forward, parsing_branch_forward, reconstruct_full, ModelConfig,
    ModelParams,
};
use crate::ops::{
    bilinear_resize, conv2d, mul, pool2d, relu, softmax_channelwise, sum_all, transposed_conv2d,
    Conv2dParams, PoolMode, TransposedConv2dParams,
};
use crate::scalar::Scalar;
use crate::tensor::{grad_check, Graph, Tensor};

/// Result of checking one primitive.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect(),
    )
    .expect("valid shape")
}

// Well-separated values (min gap 0.05) so max-pool argmax never flips under
// the finite-difference perturbation.
fn separated_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        levels.swap(i, j);
    }
    Tensor::new(
        shape,
        levels.iter().map(|&l| T::from_f64(l as f64 * 0.05 - 1.0)).collect(),
    )
    .expect("valid shape")
}

// Random linear functional: loss = sum(out .* R). Exercises the backward of
// `out`'s producer with a dense, structured covector.
fn functional<T: Scalar>(g: &Graph<T>, out: &Tensor<T>, probe: &Tensor<T>) -> Result<Tensor<T>> {
    sum_all(g, &mul(g, out, probe)?)
}

fn run_trials(
    trials: usize,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        max_err = max_err.max(one(&mut rng)?);
    }
    Ok((trials, max_err))
}

fn check_conv2d<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0xC0DE, |rng| {
        let (in_c, out_c) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let k = rng.gen_range(1..4usize);
        let dil = rng.gen_range(1..3usize);
        let stride = rng.gen_range(1..3usize);
        let pad = rng.gen_range(0..2usize);
        let span = dil * (k - 1) + 1;
        let h = rng.gen_range(span + 1..span + 5);
        let w = rng.gen_range(span + 1..span + 5);
        // positive measure keeps every derivative bounded away from zero
        let x = rand_tensor::<T>(rng, &[1, in_c, h, w], 0.2, 1.2);
        let weight = rand_tensor::<T>(rng, &[out_c, in_c, k, k], 0.1, 0.9);
        let bias = rand_tensor::<T>(rng, &[out_c], 0.1, 0.5);

        let params = Conv2dParams {
            weight: weight.clone(),
            bias: Some(bias.clone()),
            stride: (stride, stride),
            padding: (pad, pad),
            dilation: (dil, dil),
        };
        let g = Graph::new();
        let out = conv2d(&g, &x, &params)?;
        let probe = rand_tensor::<T>(rng, out.shape(), 0.5, 1.5);

        // alternate the differentiated tensor: input, weight, bias
        let which = rng.gen_range(0..3);
        let target = [&x, &weight, &bias][which].detached_copy();
        let (xc, wc, bc, pc) = (x.clone(), weight.clone(), bias.clone(), probe.clone());
        grad_check(
            move |g, t| {
                let (xi, wi, bi) = match which {
                    0 => (t.clone(), wc.detached_copy(), bc.detached_copy()),
                    1 => (xc.detached_copy(), t.clone(), bc.detached_copy()),
                    _ => (xc.detached_copy(), wc.detached_copy(), t.clone()),
                };
                let p = Conv2dParams {
                    weight: wi,
                    bias: Some(bi),
                    stride: (stride, stride),
                    padding: (pad, pad),
                    dilation: (dil, dil),
                };
                let out = conv2d(g, &xi, &p)?;
                functional(g, &out, &pc)
            },
            &target,
            eps,
        )
    })
}

fn check_tconv<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0xDEC0, |rng| {
        let (in_c, out_c) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let k = rng.gen_range(1..4usize);
        let stride = rng.gen_range(1..3usize);
        let pad = rng.gen_range(0..k).min(k - 1);
        let h = rng.gen_range(2..5usize);
        let w = rng.gen_range(2..5usize);
        // keep output extent positive
        if (h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad {
            return Ok(0.0);
        }
        let x = rand_tensor::<T>(rng, &[1, in_c, h, w], 0.2, 1.2);
        let weight = rand_tensor::<T>(rng, &[in_c, out_c, k, k], 0.1, 0.9);
        let params = TransposedConv2dParams {
            weight: weight.clone(),
            bias: None,
            stride: (stride, stride),
            padding: (pad, pad),
        };
        let g = Graph::new();
        let out = transposed_conv2d(&g, &x, &params)?;
        let probe = rand_tensor::<T>(rng, out.shape(), 0.5, 1.5);

        let which = rng.gen_range(0..2);
        let target = [&x, &weight][which].detached_copy();
        let (xc, wc, pc) = (x.clone(), weight.clone(), probe.clone());
        grad_check(
            move |g, t| {
                let (xi, wi) = match which {
                    0 => (t.clone(), wc.detached_copy()),
                    _ => (xc.detached_copy(), t.clone()),
                };
                let p = TransposedConv2dParams {
                    weight: wi,
                    bias: None,
                    stride: (stride, stride),
                    padding: (pad, pad),
                };
                let out = transposed_conv2d(g, &xi, &p)?;
                functional(g, &out, &pc)
            },
            &target,
            eps,
        )
    })
}

fn check_bilinear<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0xB111, |rng| {
        let c = rng.gen_range(1..3usize);
        let (h, w) = (rng.gen_range(2..6usize), rng.gen_range(2..6usize));
        let (oh, ow) = (rng.gen_range(1..8usize), rng.gen_range(1..8usize));
        let x = rand_tensor::<T>(rng, &[1, c, h, w], 0.2, 1.2);
        let g = Graph::new();
        let out = bilinear_resize(&g, &x, oh, ow)?;
        let probe = rand_tensor::<T>(rng, out.shape(), 0.5, 1.5);
        grad_check(
            move |g, t| {
                let out = bilinear_resize(g, t, oh, ow)?;
                functional(g, &out, &probe)
            },
            &x,
            eps,
        )
    })
}

fn check_pool<T: Scalar>(trials: usize, eps: T, mode: PoolMode) -> Result<(usize, f64)> {
    run_trials(trials, 0x9001 + mode as u64, |rng| {
        let c = rng.gen_range(1..3usize);
        let (h, w) = (rng.gen_range(3..8usize), rng.gen_range(3..8usize));
        let grid = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let x = match mode {
            PoolMode::Avg => rand_tensor::<T>(rng, &[1, c, h, w], 0.2, 1.2),
            PoolMode::Max => separated_tensor::<T>(rng, &[1, c, h, w]),
        };
        let g = Graph::new();
        let out = pool2d(&g, &x, mode, grid)?;
        let probe = rand_tensor::<T>(rng, out.shape(), 0.5, 1.5);
        grad_check(
            move |g, t| {
                let out = pool2d(g, t, mode, grid)?;
                functional(g, &out, &probe)
            },
            &x,
            eps,
        )
    })
}

fn check_relu<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0x4E1D, |rng| {
        let n = rng.gen_range(4..40usize);
        // keep inputs away from the kink by more than the step
        let data: Vec<T> = (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.0);
                T::from_f64(if rng.gen_bool(0.5) { mag } else { -mag })
            })
            .collect();
        let x = Tensor::new(&[n], data)?;
        let probe = rand_tensor::<T>(rng, &[n], 0.5, 1.5);
        grad_check(
            move |g, t| {
                let out = relu(g, t)?;
                functional(g, &out, &probe)
            },
            &x,
            eps,
        )
    })
}

fn check_softmax<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0x50F7, |rng| {
        let c = rng.gen_range(2..6usize);
        let (h, w) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let x = rand_tensor::<T>(rng, &[c, h, w], -2.0, 2.0);
        let probe = rand_tensor::<T>(rng, &[c, h, w], -1.0, 1.0);
        grad_check(
            move |g, t| {
                let out = softmax_channelwise(g, t)?;
                functional(g, &out, &probe)
            },
            &x,
            eps,
        )
    })
}

fn random_labels(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> (OneHotLabels, LabelMap) {
    let ids: Vec<u8> = (0..rows).map(|_| rng.gen_range(0..classes as u8)).collect();
    let map = LabelMap::new(1, rows, ids.clone()).expect("non-empty");
    (
        OneHotLabels::from_ids(ids.iter().map(|&v| v as u32).collect(), classes).expect("valid"),
        map,
    )
}

fn simplex_rows<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..0.95)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|&v| T::from_f64(v / s)));
    }
    Tensor::new(&[rows, classes], data).expect("valid shape")
}

fn check_loss<T: Scalar>(trials: usize, which: usize) -> Result<(usize, f64)> {
    // log-curvature dominates here; the default (smaller) step is the right one
    let eps = T::from_f64(T::CHECK_EPS);
    run_trials(trials, 0x105 + which as u64, |rng| {
        let rows = rng.gen_range(2..12usize);
        let classes = rng.gen_range(2..6usize);
        let probs = simplex_rows::<T>(rng, rows, classes);
        let (labels, map) = random_labels(rng, rows, classes);
        let ratios = class_ratios(&map, classes)?;
        let cfg = LossConfig {
            alpha: [1.0, 2.0, 3.0, 6.0][rng.gen_range(0..4)],
            gamma: [0.0, 1.0, 2.0][rng.gen_range(0..3)],
            alpha_t: 1.0,
            clamp_eps: 1e-7,
        };
        grad_check(
            move |g, p| match which {
                0 => cross_entropy(g, p, &labels),
                1 => focal_loss(g, p, &labels, &cfg),
                _ => mcb_focal_loss(g, p, &labels, &ratios, &cfg),
            },
            &probs,
            eps,
        )
    })
}

fn check_fuse_multiscale<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0xF05E, |rng| {
        let channels = rng.gen_range(1..3usize);
        let target = rng.gen_range(4..7usize);
        let sizes = [(1usize, 1usize), (2, 2), (target, target)];
        let p = DbBlockParams::<T>::init(
            channels,
            (target, target),
            &sizes,
            UpsamplePaths::Both,
        )?;
        // jitter the learned weights away from the symmetric init
        for s in &p.scales {
            for t in [&s.weight_d.weight, &s.weight_b.weight, &s.deconv.weight] {
                t.apply_update(|w| {
                    for v in w.iter_mut() {
                        *v = *v + T::from_f64(rng.gen_range(-0.2..0.2));
                    }
                });
            }
        }
        let feats: Vec<Tensor<T>> = sizes
            .iter()
            .map(|&(h, w)| rand_tensor::<T>(rng, &[1, channels, h, w], 0.2, 1.2))
            .collect();
        let g = Graph::new();
        let scale_feats: Vec<ScaleFeature<T>> = feats
            .iter()
            .enumerate()
            .map(|(i, t)| ScaleFeature {
                index: i,
                tensor: t.clone(),
            })
            .collect();
        let out = fuse_multiscale(&g, &scale_feats, &p)?;
        let probe = rand_tensor::<T>(rng, out.shape(), 0.5, 1.5);

        let which = rng.gen_range(0..sizes.len());
        let target_t = feats[which].detached_copy();
        let feats_c = feats.clone();
        grad_check(
            move |g, t| {
                let scale_feats: Vec<ScaleFeature<T>> = feats_c
                    .iter()
                    .enumerate()
                    .map(|(i, f)| ScaleFeature {
                        index: i,
                        tensor: if i == which { t.clone() } else { f.detached_copy() },
                    })
                    .collect();
                let out = fuse_multiscale(g, &scale_feats, &p)?;
                functional(g, &out, &probe)
            },
            &target_t,
            eps,
        )
    })
}

fn check_mcb_through_softmax<T: Scalar>(trials: usize) -> Result<(usize, f64)> {
    let eps = T::from_f64(T::CHECK_EPS);
    run_trials(trials, 0x10C1, |rng| {
        let (n, c, h, w) = (2usize, rng.gen_range(2..4usize), 4usize, 4usize);
        let logits = rand_tensor::<T>(rng, &[n, c, h, w], -1.5, 1.5);
        let per_image: Vec<(OneHotLabels, crate::losses::ClassRatioVector)> = (0..n)
            .map(|_| {
                let ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
                let map = LabelMap::new(h, w, ids).expect("non-empty");
                (
                    OneHotLabels::from_label_map(&map, c).expect("valid"),
                    class_ratios(&map, c).expect("valid"),
                )
            })
            .collect();
        let cfg = LossConfig::default();
        grad_check(
            move |g, t| {
                let probs = softmax_channelwise(g, t)?;
                let flat = crate::ops::flatten_pixels(g, &probs)?;
                let mut total: Option<Tensor<T>> = None;
                for (i, (labels, ratios)) in per_image.iter().enumerate() {
                    let rows = crate::ops::slice_rows(g, &flat, i * h * w, h * w)?;
                    let li = mcb_focal_loss(g, &rows, labels, ratios, &cfg)?;
                    total = Some(match total {
                        None => li,
                        Some(tacc) => crate::ops::add(g, &tacc, &li)?,
                    });
                }
                crate::ops::scale(g, &total.expect("n >= 1"), T::from_f64(1.0 / n as f64))
            },
            &logits,
            eps,
        )
    })
}

// Toy 32x32 configuration for the end-to-end composition check.
fn composition_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.input_size = (32, 32);
    cfg.stage_channels = vec![3, 4, 5, 5];
    cfg.stage_strides = vec![4, 8, 8, 8];
    cfg.crop_size = 8;
    cfg.pool_grids = vec![(1, 1), (2, 2), (4, 4)];
    cfg.fused_channels = 4;
    cfg.num_parse_classes = 7;
    cfg.bg_logit = 0.25;
    cfg
}

fn check_parsing_composition<T: Scalar>(trials: usize, eps: T) -> Result<(usize, f64)> {
    run_trials(trials, 0xFACE, |rng| {
        let cfg = composition_config();
        let params = ModelParams::<T>::init(&cfg, rng.gen())?;
        let image = rand_tensor::<T>(rng, &[1, 3, 32, 32], 0.0, 1.0);

        // Freeze the boxes at the base point: box coordinates are discrete and
        // deliberately outside the differentiated path.
        let boxes = {
            let g = Graph::new();
            let stages = backbone_forward(&g, &image, &params)?;
            let seg = mask_branch_forward(&g, &stages[3], &params)?;
            let posterior = softmax_channelwise(&g, &seg)?;
            crate::model::locate_hand(&posterior, cfg.loc_threshold, cfg.loc_margin)?
        };

        let run = |g: &Graph<T>, probe: &Tensor<T>| -> Result<Tensor<T>> {
            let stages = backbone_forward(g, &image, &params)?;
            let seg = mask_branch_forward(g, &stages[3], &params)?;
            let posterior = softmax_channelwise(g, &seg)?;
            let crop = parsing_branch_forward(g, &stages, Some(&posterior), &boxes, &params)?;
            let full = reconstruct_full(g, &crop, &boxes, cfg.input_size, cfg.bg_logit)?;
            functional(g, &full, probe)
        };

        let probe = rand_tensor::<T>(
            rng,
            &[1, cfg.num_parse_classes, cfg.input_size.0, cfg.input_size.1],
            -1.0,
            1.0,
        );

        // Differentiate with respect to a deep parameter so the check crosses
        // the whole composition: a stage projection (through concat, crop,
        // pools, the fusion block, the residual, the classifier, and the
        // paste) or the classifier itself.
        let parsing = params.parsing.as_ref().expect("full model");
        let checked = if rng.gen_bool(0.5) {
            parsing.stage_projs[0].weight.clone()
        } else {
            parsing.classifier.weight.clone()
        };

        // Analytic gradient through the live parameter.
        params.zero_all_grads();
        let g = Graph::new();
        let loss = run(&g, &probe)?;
        crate::tensor::backward(&loss, &g)?;
        let analytic = checked.grad().unwrap_or_else(|| vec![T::zero(); checked.len()]);
        params.zero_all_grads();

        // Central differences by perturbing the parameter in place.
        let base = checked.to_vec();
        let mut max_rel = 0.0f64;
        for i in 0..base.len() {
            checked.apply_update(|b| b[i] = base[i] + eps);
            let fp = run(&Graph::new(), &probe)?.item().as_f64();
            checked.apply_update(|b| b[i] = base[i] - eps);
            let fm = run(&Graph::new(), &probe)?.item().as_f64();
            checked.apply_update(|b| b[i] = base[i]);
            let numeric = (fp - fm) / (2.0 * eps.as_f64());
            let a = analytic[i].as_f64();
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    })
}

// f32 central differences need a larger step than the checker default:
// at eps = 1e-3 the evaluation noise of a summed functional exceeds the
// derivative signal; 1e-2 keeps truncation well under the 1e-3 tolerance.
fn suite_eps<T: Scalar>() -> T {
    T::from_f64(if T::CHECK_TOL >= 1e-4 { 1e-2 } else { 1e-6 })
}

/// Run the whole verification suite at the given precision.
pub fn run_suite<T: Scalar>(trials: usize) -> Result<Vec<SuiteEntry>> {
    let eps = suite_eps::<T>();
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: (usize, f64)| {
        out.push(SuiteEntry {
            name,
            trials: r.0,
            max_rel_err: r.1,
        });
    };
    push("conv2d", check_conv2d::<T>(trials, eps)?);
    push("transposed_conv2d", check_tconv::<T>(trials, eps)?);
    push("bilinear_resize", check_bilinear::<T>(trials, eps)?);
    push("pool2d_avg", check_pool::<T>(trials, eps, PoolMode::Avg)?);
    push("pool2d_max", check_pool::<T>(trials, eps, PoolMode::Max)?);
    push("relu", check_relu::<T>(trials, eps)?);
    push("softmax_channelwise", check_softmax::<T>(trials, eps)?);
    push("cross_entropy", check_loss::<T>(trials, 0)?);
    push("focal_loss", check_loss::<T>(trials, 1)?);
    push("mcb_focal_loss", check_loss::<T>(trials, 2)?);
    push("fuse_multiscale", check_fuse_multiscale::<T>(trials, eps)?);
    push(
        "mcb_loss_through_softmax",
        check_mcb_through_softmax::<T>(trials)?,
    );
    push(
        "parsing_branch_composition",
        check_parsing_composition::<T>(trials, eps)?,
    );
    Ok(out)
}
