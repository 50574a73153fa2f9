//! Forward dataflow: backbone stages, mask branch, hand localization, prior
//! fusion, the pyramid/fusion parsing branch, and reconstruction to input
//! resolution.

use crate::dbblock::{fuse_multiscale, ScaleFeature};
use crate::error::{Error, Result};
use crate::model::config::PriorMode;
use crate::model::params::ModelParams;
use crate::ops::{
    add, bilinear_resize, concat_batch, concat_channels, conv2d, crop_spatial, paste_spatial,
    pool2d, relu, slice_batch, softmax_channelwise, transposed_conv2d, BoundingBox, PoolMode,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Everything one forward pass produces.
pub struct ModelOutput<T: Scalar> {
    /// Mask-branch logits at input resolution, when the branch exists.
    pub seg_logits: Option<Tensor<T>>,
    /// Parse logits at input resolution.
    pub parse_logits: Tensor<T>,
    /// Image-coordinate hand box per batch item.
    pub boxes: Vec<BoundingBox>,
}

/// Run the four backbone stages; the last three share one spatial resolution.
pub fn backbone_forward<T: Scalar>(
    g: &Graph<T>,
    image: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let cfg = &params.config;
    let want = [
        image.shape().first().copied().unwrap_or(0),
        3,
        cfg.input_size.0,
        cfg.input_size.1,
    ];
    if image.rank() != 4 || image.shape()[1..] != want[1..] {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            expected: want.to_vec(),
            got: image.shape().to_vec(),
        });
    }
    let mut x = image.clone();
    let mut outs = Vec::with_capacity(4);
    for stage in &params.backbone.stages {
        for conv in &stage.convs {
            x = relu(g, &conv2d(g, &x, conv)?)?;
        }
        outs.push(x.clone());
    }
    Ok(outs)
}

/// The segmentation subnet over stage 4: logits for {background, left, right}
/// at full input resolution.
pub fn mask_branch_forward<T: Scalar>(
    g: &Graph<T>,
    stage4: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let mask = params.mask.as_ref().ok_or_else(|| Error::InvalidArgument {
        op: "mask_branch_forward",
        reason: "model built without a mask branch".into(),
    })?;
    let (h, w) = params.config.input_size;
    let mut x = stage4.clone();
    for conv in &mask.convs[..mask.convs.len() - 1] {
        x = relu(g, &conv2d(g, &x, conv)?)?;
    }
    x = relu(g, &transposed_conv2d(g, &x, &mask.tconv)?)?;
    x = conv2d(g, &x, mask.convs.last().expect("census: 5 convs"))?;
    bilinear_resize(g, &x, h, w)
}

/// Tight box over pixels whose non-background posterior exceeds the
/// threshold, expanded by the margin fraction and clipped. Returns the
/// full-image box when nothing qualifies. This read is not differentiated:
/// box coordinates are discrete.
pub fn locate_hand<T: Scalar>(
    seg_posterior: &Tensor<T>,
    threshold: f64,
    margin: f64,
) -> Result<Vec<BoundingBox>> {
    if seg_posterior.rank() != 4 || seg_posterior.shape()[1] < 2 {
        return Err(Error::InvalidArgument {
            op: "locate_hand",
            reason: format!("expected [N,C>=2,H,W], got {:?}", seg_posterior.shape()),
        });
    }
    let (n, c, h, w) = (
        seg_posterior.shape()[0],
        seg_posterior.shape()[1],
        seg_posterior.shape()[2],
        seg_posterior.shape()[3],
    );
    let data = seg_posterior.data();
    let thr = T::from_f64(threshold);
    let mut boxes = Vec::with_capacity(n);
    for img in 0..n {
        let base = img * c * h * w;
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                // non-background posterior: everything past channel 0
                let mut p = T::zero();
                for ch in 1..c {
                    p = p + data[base + ch * h * w + y * w + x];
                }
                if p > thr {
                    any = true;
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        if !any {
            boxes.push(BoundingBox::full(h, w));
            continue;
        }
        let bh = y1 - y0 + 1;
        let bw = x1 - x0 + 1;
        let my = (margin * bh as f64).round() as usize;
        let mx = (margin * bw as f64).round() as usize;
        let top = y0.saturating_sub(my);
        let left = x0.saturating_sub(mx);
        let bottom = (y1 + my).min(h - 1);
        let right = (x1 + mx).min(w - 1);
        boxes.push(BoundingBox::new(
            top,
            left,
            bottom - top + 1,
            right - left + 1,
        ));
    }
    Ok(boxes)
}

/// Parsing branch: 1x1-project and sum the last three stages, fuse the mask
/// prior, crop each item to its (feature-coordinate) box, resize to the crop
/// size, pyramid-pool, fuse across scales, add the pre-pool map back, and
/// classify. Output: `[N, C_p, S, S]`.
pub fn parsing_branch_forward<T: Scalar>(
    g: &Graph<T>,
    stages: &[Tensor<T>],
    seg_posterior: Option<&Tensor<T>>,
    boxes: &[BoundingBox],
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let parsing = params
        .parsing
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument {
            op: "parsing_branch_forward",
            reason: "model built without a parsing branch".into(),
        })?;
    let cfg = &params.config;
    if stages.len() != 4 {
        return Err(Error::InvalidArgument {
            op: "parsing_branch_forward",
            reason: format!("expected 4 stage maps, got {}", stages.len()),
        });
    }
    let n = stages[0].shape()[0];
    if boxes.len() != n {
        return Err(Error::InvalidArgument {
            op: "parsing_branch_forward",
            reason: format!("{} boxes for batch of {n}", boxes.len()),
        });
    }
    let (fh, fw) = cfg.feature_size();

    // Aggregate the last three stages at the shared resolution.
    let mut agg: Option<Tensor<T>> = None;
    for (proj, stage) in parsing.stage_projs.iter().zip(&stages[1..4]) {
        let p = conv2d(g, stage, proj)?;
        agg = Some(match agg {
            None => p,
            Some(a) => add(g, &a, &p)?,
        });
    }
    let mut feat = agg.expect("three projections");

    // Prior fusion with the mask posterior, downsampled to feature resolution.
    if let Some(post) = seg_posterior {
        let prior = bilinear_resize(g, post, fh, fw)?;
        feat = match cfg.prior_mode {
            PriorMode::Concat => concat_channels(g, &[feat, prior])?,
            PriorMode::Add => {
                let proj = parsing.prior_proj.as_ref().expect("add mode has prior_proj");
                add(g, &feat, &conv2d(g, &prior, proj)?)?
            }
        };
    }

    // Per-item crop at the feature-scaled box, resized to the crop size.
    let s = cfg.crop_size;
    let mut crops = Vec::with_capacity(n);
    for (i, box_) in boxes.iter().enumerate() {
        let fbox = box_.rescale(cfg.input_size, (fh, fw));
        let item = slice_batch(g, &feat, i)?;
        let cropped = crop_spatial(g, &item, fbox)?;
        crops.push(bilinear_resize(g, &cropped, s, s)?);
    }
    let pre_pool = concat_batch(g, &crops)?;

    // Pyramid pooling to the configured grids, then the fusion block.
    let mut feats = Vec::with_capacity(cfg.pool_grids.len());
    for (idx, &grid) in cfg.pool_grids.iter().enumerate() {
        feats.push(ScaleFeature {
            index: idx,
            tensor: pool2d(g, &pre_pool, PoolMode::Avg, grid)?,
        });
    }
    let fused = fuse_multiscale(g, &feats, &parsing.db)?;
    let residual = add(g, &fused, &pre_pool)?;
    conv2d(g, &residual, &parsing.classifier)
}

/// Resize crop logits to the box extent and paste them at the box location;
/// outside the box the logits softmax to background-certain.
pub fn reconstruct_full<T: Scalar>(
    g: &Graph<T>,
    crop_logits: &Tensor<T>,
    boxes: &[BoundingBox],
    full_size: (usize, usize),
    bg_logit: f64,
) -> Result<Tensor<T>> {
    if crop_logits.rank() != 4 {
        return Err(Error::InvalidArgument {
            op: "reconstruct_full",
            reason: format!("expected [N,C,S,S], got {:?}", crop_logits.shape()),
        });
    }
    let n = crop_logits.shape()[0];
    let c = crop_logits.shape()[1];
    if boxes.len() != n {
        return Err(Error::InvalidArgument {
            op: "reconstruct_full",
            reason: format!("{} boxes for batch of {n}", boxes.len()),
        });
    }
    for b in boxes {
        b.check_within(full_size.0, full_size.1)?;
    }
    let mut background = vec![T::zero(); c];
    background[0] = T::from_f64(bg_logit);

    let mut items = Vec::with_capacity(n);
    for (i, box_) in boxes.iter().enumerate() {
        let item = slice_batch(g, crop_logits, i)?;
        let sized = bilinear_resize(g, &item, box_.height, box_.width)?;
        items.push(paste_spatial(g, &sized, *box_, full_size, &background)?);
    }
    concat_batch(g, &items)
}

/// End-to-end forward pass, composing the pieces the active configuration
/// calls for.
pub fn model_forward<T: Scalar>(
    g: &Graph<T>,
    image: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<ModelOutput<T>> {
    let cfg = &params.config;
    let stages = backbone_forward(g, image, params)?;
    let n = image.shape()[0];
    let (h, w) = cfg.input_size;

    if !cfg.use_parsing_branch {
        // Single-branch baseline: classify stage 4 and upsample.
        let head = params.baseline_head.as_ref().expect("baseline head");
        let logits = conv2d(g, &stages[3], head)?;
        let parse_logits = bilinear_resize(g, &logits, h, w)?;
        return Ok(ModelOutput {
            seg_logits: None,
            parse_logits,
            boxes: vec![BoundingBox::full(h, w); n],
        });
    }

    let (seg_logits, posterior, boxes) = if cfg.use_mask_branch {
        let seg_logits = mask_branch_forward(g, &stages[3], params)?;
        let posterior = softmax_channelwise(g, &seg_logits)?;
        let boxes = locate_hand(&posterior, cfg.loc_threshold, cfg.loc_margin)?;
        (Some(seg_logits), Some(posterior), boxes)
    } else {
        (None, None, vec![BoundingBox::full(h, w); n])
    };

    let crop_logits = parsing_branch_forward(g, &stages, posterior.as_ref(), &boxes, params)?;
    let parse_logits = reconstruct_full(g, &crop_logits, &boxes, (h, w), cfg.bg_logit)?;
    Ok(ModelOutput {
        seg_logits,
        parse_logits,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.input_size = (32, 32);
        cfg.stage_channels = vec![4, 6, 8, 8];
        cfg.stage_strides = vec![2, 4, 4, 4];
        cfg.crop_size = 8;
        cfg.pool_grids = vec![(1, 1), (2, 2), (4, 4)];
        cfg.fused_channels = 5;
        cfg.num_parse_classes = 7;
        cfg
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(
            &[n, 3, h, w],
            (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_resolutions_match_config() {
        let cfg = ModelConfig::default();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 1, 64, 64);
        let g = Graph::new();
        let stages = backbone_forward(&g, &img, &params).unwrap();
        assert_eq!(&stages[0].shape()[2..], &[16, 16]);
        for s in &stages[1..] {
            assert_eq!(&s.shape()[2..], &[8, 8]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_config();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 2, 32, 32);
        let a = model_forward(&Graph::new(), &img, &params).unwrap();
        let b = model_forward(&Graph::new(), &img, &params).unwrap();
        assert_eq!(a.parse_logits.to_vec(), b.parse_logits.to_vec());
        assert_eq!(
            a.seg_logits.unwrap().to_vec(),
            b.seg_logits.unwrap().to_vec()
        );
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn output_shapes_match_contract() {
        let cfg = toy_config();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 2, 32, 32);
        let g = Graph::new();
        let out = model_forward(&g, &img, &params).unwrap();
        assert_eq!(out.seg_logits.as_ref().unwrap().shape(), &[2, 3, 32, 32]);
        assert_eq!(out.parse_logits.shape(), &[2, 7, 32, 32]);
        assert!(out.parse_logits.all_finite());
    }

    #[test]
    fn mask_posterior_rows_normalize() {
        let cfg = toy_config();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 1, 32, 32);
        let g = Graph::new();
        let stages = backbone_forward(&g, &img, &params).unwrap();
        let logits = mask_branch_forward(&g, &stages[3], &params).unwrap();
        let post = softmax_channelwise(&g, &logits).unwrap();
        let d = post.to_vec();
        let hw = 32 * 32;
        for p in 0..hw {
            let s: f64 = (0..3).map(|c| d[c * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn locate_hand_known_box() {
        // hand pixels exactly rows 2..=5, cols 3..=6, margin 0
        let (h, w) = (8, 8);
        let mut data = vec![0.0f64; 3 * h * w];
        for p in 0..h * w {
            data[p] = 1.0; // background certain
        }
        for y in 2..=5 {
            for x in 3..=6 {
                data[y * w + x] = 0.2;
                data[h * w + y * w + x] = 0.8; // left-hand posterior
            }
        }
        let post = Tensor::new(&[1, 3, h, w], data).unwrap();
        let boxes = locate_hand(&post, 0.5, 0.0).unwrap();
        assert_eq!(boxes[0], BoundingBox::new(2, 3, 4, 4));
    }

    #[test]
    fn locate_hand_fallbacks() {
        // no hand pixels -> full-image box; all pixels hand -> full-image box
        let bg = Tensor::new(&[1, 3, 4, 4], {
            let mut d = vec![0.0f64; 48];
            d[..16].fill(1.0);
            d
        })
        .unwrap();
        assert_eq!(locate_hand(&bg, 0.5, 0.1).unwrap()[0], BoundingBox::full(4, 4));

        let hand = Tensor::new(&[1, 3, 4, 4], {
            let mut d = vec![0.0f64; 48];
            d[16..32].fill(1.0);
            d
        })
        .unwrap();
        assert_eq!(locate_hand(&hand, 0.5, 0.1).unwrap()[0], BoundingBox::full(4, 4));
    }

    #[test]
    fn reconstruct_outside_box_is_background() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let crop = Tensor::new(
            &[1, 4, 3, 3],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let box_ = BoundingBox::new(2, 3, 3, 3);
        let full = reconstruct_full(&g, &crop, &[box_], (10, 12), 10.0).unwrap();
        let d = full.to_vec();
        let (h, w) = (10, 12);
        for y in 0..h {
            for x in 0..w {
                let inside = (2..5).contains(&y) && (3..6).contains(&x);
                if !inside {
                    // argmax over channels must be background (channel 0)
                    let vals: Vec<f64> = (0..4).map(|c| d[c * h * w + y * w + x]).collect();
                    let argmax = (0..4).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
                    assert_eq!(argmax, 0, "pixel ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn full_image_box_reconstruct_is_pure_resize() {
        let g = Graph::new();
        let crop = Tensor::new(&[1, 2, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0])
            .unwrap();
        let box_ = BoundingBox::full(4, 4);
        let full = reconstruct_full(&g, &crop, &[box_], (4, 4), 10.0).unwrap();
        let direct = bilinear_resize(&g, &crop, 4, 4).unwrap();
        assert_eq!(full.to_vec(), direct.to_vec());
    }

    #[test]
    fn paste_then_crop_recovers_resized_crop() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let crop: Tensor<f64> = Tensor::new(
            &[1, 3, 4, 4],
            (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let box_ = BoundingBox::new(1, 2, 5, 6);
        let full = reconstruct_full(&g, &crop, &[box_], (9, 11), 10.0).unwrap();
        let back = crop_spatial(&g, &full, box_).unwrap();
        let direct = bilinear_resize(&g, &crop, 5, 6).unwrap();
        for (a, b) in back.to_vec().iter().zip(direct.to_vec()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn baseline_variant_runs_without_branches() {
        let mut cfg = toy_config();
        cfg.use_parsing_branch = false;
        cfg.use_mask_branch = false;
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 1, 32, 32);
        let out = model_forward(&Graph::new(), &img, &params).unwrap();
        assert!(out.seg_logits.is_none());
        assert_eq!(out.parse_logits.shape(), &[1, 7, 32, 32]);
    }

    #[test]
    fn every_param_gets_gradient_on_combined_loss() {
        use crate::losses::{class_ratios, mcb_focal_loss, cross_entropy, LossConfig, OneHotLabels};
        use crate::label::LabelMap;
        use crate::ops::{flatten_pixels, scale};
        use crate::tensor::backward;

        let cfg = toy_config();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = random_image(&mut rng, 2, 32, 32);
        let g = Graph::new();
        let out = model_forward(&g, &img, &params).unwrap();

        // parse loss + seg loss so both branches receive gradients
        let probs = softmax_channelwise(&g, &out.parse_logits).unwrap();
        let flat = flatten_pixels(&g, &probs).unwrap();
        let ids: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..7)).collect();
        let map = LabelMap::new(2 * 32, 32, ids).unwrap();
        let labels = OneHotLabels::from_label_map(&map, 7).unwrap();
        let ratios = class_ratios(&map, 7).unwrap();
        let parse_loss =
            mcb_focal_loss(&g, &flat, &labels, &ratios, &LossConfig::default()).unwrap();

        let seg_probs = softmax_channelwise(&g, out.seg_logits.as_ref().unwrap()).unwrap();
        let seg_flat = flatten_pixels(&g, &seg_probs).unwrap();
        let seg_ids: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..3)).collect();
        let seg_map = LabelMap::new(2 * 32, 32, seg_ids).unwrap();
        let seg_labels = OneHotLabels::from_label_map(&seg_map, 3).unwrap();
        let seg_loss = cross_entropy(&g, &seg_flat, &seg_labels).unwrap();

        let total = add(&g, &parse_loss, &scale(&g, &seg_loss, 1.0).unwrap()).unwrap();
        backward(&total, &g).unwrap();

        for (name, t) in params.named_params() {
            let grad = t.grad().unwrap_or_default();
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }
}
