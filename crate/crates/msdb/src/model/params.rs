//! Learnable parameters of the model, their initialization, and the stable
//! parameter registry the optimizer and checkpoints rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dbblock::DbBlockParams;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PriorMode};
use crate::ops::{Conv2dParams, TransposedConv2dParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
fn conv_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    bias: bool,
) -> Conv2dParams<T> {
    let fan_in = (in_c * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data: Vec<T> = (0..out_c * in_c * k * k)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    let weight = Tensor::param(&[out_c, in_c, k, k], data).expect("conv weight");
    let bias = bias.then(|| Tensor::param(&[out_c], vec![T::zero(); out_c]).expect("conv bias"));
    Conv2dParams::new(weight, bias)
}

fn tconv_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
) -> TransposedConv2dParams<T> {
    let fan_in = (in_c * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data: Vec<T> = (0..in_c * out_c * k * k)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    let weight = Tensor::param(&[in_c, out_c, k, k], data).expect("tconv weight");
    let bias = Tensor::param(&[out_c], vec![T::zero(); out_c]).expect("tconv bias");
    TransposedConv2dParams::new(weight, Some(bias))
}

/// One backbone stage: a pair of 3x3 conv+relu layers.
pub struct StageParams<T: Scalar> {
    pub convs: Vec<Conv2dParams<T>>,
}

pub struct BackboneParams<T: Scalar> {
    pub stages: Vec<StageParams<T>>,
}

/// The segmentation subnet: four 3x3 convs, one stride-2 transposed conv,
/// one 1x1 conv to the seg classes, then a resize to input resolution.
pub struct MaskBranchParams<T: Scalar> {
    pub convs: Vec<Conv2dParams<T>>,
    pub tconv: TransposedConv2dParams<T>,
}

impl<T: Scalar> MaskBranchParams<T> {
    /// (convolution layers, transposed convolution layers, resize layers)
    pub fn layer_census(&self) -> (usize, usize, usize) {
        (self.convs.len(), 1, 1)
    }
}

pub struct ParsingBranchParams<T: Scalar> {
    /// 1x1 projections of the last three stages onto the fused width.
    pub stage_projs: Vec<Conv2dParams<T>>,
    /// Present only in `PriorMode::Add`: projects the 3-channel posterior
    /// onto the fused width.
    pub prior_proj: Option<Conv2dParams<T>>,
    pub db: DbBlockParams<T>,
    pub classifier: Conv2dParams<T>,
}

pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<T>,
    pub mask: Option<MaskBranchParams<T>>,
    pub parsing: Option<ParsingBranchParams<T>>,
    /// 1x1 classifier over stage 4 for the single-branch baseline.
    pub baseline_head: Option<Conv2dParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut stages = Vec::with_capacity(4);
        let mut in_c = 3;
        let mut prev_stride = 1;
        for i in 0..4 {
            let out_c = config.stage_channels[i];
            let factor = config.stage_strides[i] / prev_stride;
            prev_stride = config.stage_strides[i];
            let dilation = if i >= 1 { config.dilations[i - 1] } else { 1 };
            let (s1, s2) = match factor {
                4 => (2, 2),
                2 => (2, 1),
                _ => (1, 1),
            };
            let conv1 = conv_init::<T>(&mut rng, out_c, in_c, 3, true)
                .with_stride(s1)
                .with_padding(dilation)
                .with_dilation(dilation);
            let conv2 = conv_init::<T>(&mut rng, out_c, out_c, 3, true)
                .with_stride(s2)
                .with_padding(dilation)
                .with_dilation(dilation);
            stages.push(StageParams {
                convs: vec![conv1, conv2],
            });
            in_c = out_c;
        }
        let backbone = BackboneParams { stages };

        let c4 = config.stage_channels[3];
        let mask = config.use_mask_branch.then(|| {
            let mut convs = Vec::with_capacity(5);
            for _ in 0..4 {
                convs.push(conv_init::<T>(&mut rng, c4, c4, 3, true).with_padding(1));
            }
            let tconv = tconv_init::<T>(&mut rng, c4, c4, 4)
                .with_stride(2)
                .with_padding(1);
            // final 1x1 to the seg classes
            convs.push(conv_init::<T>(&mut rng, config.num_seg_classes, c4, 1, true));
            MaskBranchParams { convs, tconv }
        });

        let parsing = if config.use_parsing_branch {
            let cf = config.fused_channels;
            let mut stage_projs = Vec::with_capacity(3);
            for i in 1..4 {
                stage_projs.push(conv_init::<T>(&mut rng, cf, config.stage_channels[i], 1, true));
            }
            let prior_proj = (config.use_mask_branch && config.prior_mode == PriorMode::Add)
                .then(|| conv_init::<T>(&mut rng, cf, config.num_seg_classes, 1, true));
            let width = config.fusion_width();
            let s = config.crop_size;
            let db = DbBlockParams::init(
                width,
                (s, s),
                &config.pool_grids,
                config.db_paths,
            )?;
            let classifier = conv_init::<T>(&mut rng, config.num_parse_classes, width, 1, true);
            Some(ParsingBranchParams {
                stage_projs,
                prior_proj,
                db,
                classifier,
            })
        } else {
            None
        };

        let baseline_head = (!config.use_parsing_branch)
            .then(|| conv_init::<T>(&mut rng, config.num_parse_classes, c4, 1, true));

        Ok(ModelParams {
            config: config.clone(),
            backbone,
            mask,
            parsing,
            baseline_head,
        })
    }

    /// Every learnable tensor, named, in a stable order. Each tensor is
    /// registered exactly once.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<(String, Tensor<T>)>, name: String, c: &Conv2dParams<T>| {
            out.push((format!("{name}.weight"), c.weight.clone()));
            if let Some(b) = &c.bias {
                out.push((format!("{name}.bias"), b.clone()));
            }
        };
        for (i, stage) in self.backbone.stages.iter().enumerate() {
            for (j, conv) in stage.convs.iter().enumerate() {
                push_conv(&mut out, format!("backbone.stage{i}.conv{j}"), conv);
            }
        }
        if let Some(mask) = &self.mask {
            for (j, conv) in mask.convs.iter().enumerate() {
                push_conv(&mut out, format!("mask.conv{j}"), conv);
            }
            out.push(("mask.tconv.weight".into(), mask.tconv.weight.clone()));
            if let Some(b) = &mask.tconv.bias {
                out.push(("mask.tconv.bias".into(), b.clone()));
            }
        }
        if let Some(parsing) = &self.parsing {
            for (i, proj) in parsing.stage_projs.iter().enumerate() {
                push_conv(&mut out, format!("parsing.proj{}", i + 1), proj);
            }
            if let Some(pp) = &parsing.prior_proj {
                push_conv(&mut out, "parsing.prior_proj".into(), pp);
            }
            out.extend(parsing.db.named_params("parsing.db"));
            push_conv(&mut out, "parsing.classifier".into(), &parsing.classifier);
        }
        if let Some(head) = &self.baseline_head {
            push_conv(&mut out, "baseline.head".into(), head);
        }
        out
    }

    /// Overwrite every parameter from a name/payload list (checkpoint reload).
    pub fn load_named(&self, entries: &[(String, Vec<T>)]) -> Result<()> {
        let params = self.named_params();
        if entries.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                params.len()
            )));
        }
        for ((name, tensor), (e_name, data)) in params.iter().zip(entries) {
            if name != e_name {
                return Err(Error::Config(format!(
                    "checkpoint tensor {e_name:?} does not match expected {name:?}"
                )));
            }
            if data.len() != tensor.len() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name:?} has {} values, expected {}",
                    data.len(),
                    tensor.len()
                )));
            }
            tensor.apply_update(|buf| buf.copy_from_slice(data));
        }
        Ok(())
    }

    pub fn zero_all_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_param_registered_exactly_once() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let named = params.named_params();
        let mut names = HashSet::new();
        let mut ids = HashSet::new();
        for (name, t) in &named {
            assert!(names.insert(name.clone()), "duplicate name {name}");
            assert!(ids.insert(t.id()), "tensor registered twice: {name}");
            assert!(t.requires_grad(), "{name} not trainable");
        }
    }

    #[test]
    fn mask_branch_census_is_five_one_one() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        assert_eq!(params.mask.as_ref().unwrap().layer_census(), (5, 1, 1));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::<f32>::init(&ModelConfig::default(), 9).unwrap();
        let b = ModelParams::<f32>::init(&ModelConfig::default(), 9).unwrap();
        let c = ModelParams::<f32>::init(&ModelConfig::default(), 10).unwrap();
        let (an, bn, cn) = (a.named_params(), b.named_params(), c.named_params());
        let mut any_diff = false;
        for ((_, x), (_, y)) in an.iter().zip(&bn) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        for ((_, x), (_, y)) in an.iter().zip(&cn) {
            if x.to_vec() != y.to_vec() {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds should differ somewhere");
    }

    #[test]
    fn baseline_config_builds_head_only() {
        let mut cfg = ModelConfig::default();
        cfg.use_parsing_branch = false;
        cfg.use_mask_branch = false;
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        assert!(params.mask.is_none());
        assert!(params.parsing.is_none());
        assert!(params.baseline_head.is_some());
    }
}
