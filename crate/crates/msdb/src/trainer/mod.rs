//! Adam optimization, the two-stage training schedule, evaluation, and
//! checkpointing. Training is deterministic: every random draw derives from
//! (seed, stage, epoch, index).

mod ablation;
mod checkpoint;

pub use ablation::{ablation_suite, format_ablation_table, AblationArm, AblationSuite};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::LossKind;
use crate::datagen::{augment, ParsingSample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::losses::{
    class_ratios, cross_entropy, focal_loss, mcb_focal_loss, LossConfig, OneHotLabels,
};
use crate::metrics::{confusion_update, ConfusionMatrix, EvalReport};
use crate::model::{
    backbone_forward, mask_branch_forward, model_forward, ModelConfig, ModelParams,
};
use crate::ops::{add, flatten_pixels, scale, slice_rows, softmax_channelwise};
use crate::scalar::Scalar;
use crate::tensor::{backward, Graph, Tensor};

/// The two training stages: the mask branch on segmentation labels first,
/// then the parsing branch on parsing labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    Mask,
    Parse,
}

impl StageId {
    pub fn number(self) -> u8 {
        match self {
            StageId::Mask => 1,
            StageId::Parse => 2,
        }
    }
}

/// Training schedule and optimizer hyperparameters. Adam beta/eps are the
/// standard defaults; only the optimizer choice and the 1e-3 learning rate
/// are pinned upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep the mask branch fixed during stage 2 so the parse loss cannot
    /// degrade localization.
    pub freeze_mask_stage2: bool,
    pub freeze_backbone_stage2: bool,
    /// Allow stage 2 without a completed stage 1.
    pub from_scratch: bool,
    pub augment: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1_epochs: 20,
            stage2_epochs: 50,
            batch_size: 4,
            seed: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_mask_stage2: true,
            freeze_backbone_stage2: false,
            from_scratch: false,
            augment: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train.stage1_epochs = {}\ntrain.stage2_epochs = {}\ntrain.batch_size = {}\ntrain.seed = {}\ntrain.lr = {}\ntrain.beta1 = {}\ntrain.beta2 = {}\ntrain.eps = {}\ntrain.freeze_mask_stage2 = {}\ntrain.freeze_backbone_stage2 = {}\ntrain.from_scratch = {}\ntrain.augment = {}\n",
            self.stage1_epochs,
            self.stage2_epochs,
            self.batch_size,
            self.seed,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.freeze_mask_stage2,
            self.freeze_backbone_stage2,
            self.from_scratch,
            self.augment,
        )
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |m: String| Error::Config(m);
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("{key}: expected integer, got {v:?}")))
        };
        let parse_u64 = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| bad(format!("{key}: expected integer, got {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("{key}: expected number, got {v:?}")))
        };
        let parse_bool = |v: &str| match v.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(bad(format!("{key}: expected true/false, got {other:?}"))),
        };
        match key {
            "train.stage1_epochs" => self.stage1_epochs = parse_usize(value)?,
            "train.stage2_epochs" => self.stage2_epochs = parse_usize(value)?,
            "train.batch_size" => self.batch_size = parse_usize(value)?,
            "train.seed" => self.seed = parse_u64(value)?,
            "train.lr" => self.lr = parse_f64(value)?,
            "train.beta1" => self.beta1 = parse_f64(value)?,
            "train.beta2" => self.beta2 = parse_f64(value)?,
            "train.eps" => self.eps = parse_f64(value)?,
            "train.freeze_mask_stage2" => self.freeze_mask_stage2 = parse_bool(value)?,
            "train.freeze_backbone_stage2" => self.freeze_backbone_stage2 = parse_bool(value)?,
            "train.from_scratch" => self.from_scratch = parse_bool(value)?,
            "train.augment" => self.augment = parse_bool(value)?,
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Adam accumulator state, parallel to a fixed parameter list.
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[(String, Tensor<T>)], schedule: &Schedule) -> Self {
        AdamState {
            lr: schedule.lr,
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            eps: schedule.eps,
            step: 0,
            m: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over `active` (indices into `params`).
/// Every active parameter must carry a gradient; all gradients on the whole
/// list are cleared afterward.
pub fn adam_step<T: Scalar>(
    params: &[(String, Tensor<T>)],
    active: &[usize],
    state: &mut AdamState<T>,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument {
            op: "adam_step",
            reason: format!(
                "state tracks {} parameters, list has {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    for &i in active {
        let (name, tensor) = &params[i];
        if !tensor.has_grad() {
            return Err(Error::InvalidArgument {
                op: "adam_step",
                reason: format!("parameter {name} has no gradient"),
            });
        }
        if state.m[i].len() != tensor.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: vec![state.m[i].len()],
                got: vec![tensor.len()],
            });
        }
    }
    state.step += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powi(state.step as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(state.step as i32));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);
    for &i in active {
        let (_, tensor) = &params[i];
        let grad = tensor.grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        tensor.apply_update(|p| {
            for j in 0..p.len() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    for (_, tensor) in params {
        tensor.zero_grad();
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub mean_iou: f64,
    pub mean_accuracy: f64,
    pub wall_s: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "stage={} epoch={} loss={:.6} mean_iou={:.6} mean_accuracy={:.6} wall_s={:.3}",
            self.stage, self.epoch, self.loss, self.mean_iou, self.mean_accuracy, self.wall_s
        )
    }
}

/// Owns the parameters, optimizer state, and stage progress of one run.
pub struct Trainer<T: Scalar> {
    pub params: ModelParams<T>,
    pub schedule: Schedule,
    pub loss_cfg: LossConfig,
    pub stage2_loss: LossKind,
    pub adam: AdamState<T>,
    pub stage1_done: usize,
    pub stage2_done: usize,
    /// Per-step training losses, appended across stages (used by tests and
    /// the overfit harness).
    pub step_losses: Vec<f64>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn stack_images<T: Scalar>(samples: &[&ParsingSample<T>]) -> Result<Tensor<T>> {
    let shape = samples[0].image.shape().to_vec(); // [3, H, W]
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                expected: shape.clone(),
                got: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(&s.image.data());
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

/// Argmax over the channel axis of `[1, C, H, W]` logits.
pub fn argmax_label_map<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    if logits.rank() != 4 || logits.shape()[0] != 1 || logits.shape()[1] > 255 {
        return Err(Error::InvalidArgument {
            op: "argmax_label_map",
            reason: format!("expected [1, C<=255, H, W], got {:?}", logits.shape()),
        });
    }
    let (c, h, w) = (logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let d = logits.data();
    let hw = h * w;
    let mut ids = vec![0u8; hw];
    for p in 0..hw {
        let mut best = d[p];
        let mut best_c = 0u8;
        for ch in 1..c {
            let v = d[ch * hw + p];
            if v > best {
                best = v;
                best_c = ch as u8;
            }
        }
        ids[p] = best_c;
    }
    LabelMap::new(h, w, ids)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model_cfg: &ModelConfig,
        schedule: Schedule,
        loss_cfg: LossConfig,
        stage2_loss: LossKind,
    ) -> Result<Self> {
        schedule.validate()?;
        loss_cfg.validate()?;
        let params = ModelParams::init(model_cfg, mix_seed(&[schedule.seed, 0xC0FFEE]))?;
        let adam = AdamState::new(&params.named_params(), &schedule);
        Ok(Trainer {
            params,
            schedule,
            loss_cfg,
            stage2_loss,
            adam,
            stage1_done: 0,
            stage2_done: 0,
            step_losses: Vec::new(),
        })
    }

    fn active_indices(&self, stage: StageId, named: &[(String, Tensor<T>)]) -> Vec<usize> {
        named
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| match stage {
                StageId::Mask => name.starts_with("backbone.") || name.starts_with("mask."),
                StageId::Parse => {
                    if name.starts_with("mask.") {
                        !self.schedule.freeze_mask_stage2
                    } else if name.starts_with("backbone.") {
                        !self.schedule.freeze_backbone_stage2
                    } else {
                        true
                    }
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn batch_loss(
        &self,
        g: &Graph<T>,
        stage: StageId,
        batch: &[&ParsingSample<T>],
        logits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let probs = softmax_channelwise(g, logits)?;
        let flat = flatten_pixels(g, &probs)?;
        let hw = batch[0].parse_label.len();
        match stage {
            StageId::Mask => {
                let mut ids = Vec::with_capacity(batch.len() * hw);
                for s in batch {
                    ids.extend(s.seg_label.ids().iter().map(|&v| v as u32));
                }
                let labels = OneHotLabels::from_ids(ids, 3)?;
                cross_entropy(g, &flat, &labels)
            }
            StageId::Parse => {
                let classes = self.params.config.num_parse_classes;
                match self.stage2_loss {
                    LossKind::CrossEntropy | LossKind::Focal => {
                        let mut ids = Vec::with_capacity(batch.len() * hw);
                        for s in batch {
                            ids.extend(s.parse_label.ids().iter().map(|&v| v as u32));
                        }
                        let labels = OneHotLabels::from_ids(ids, classes)?;
                        if self.stage2_loss == LossKind::CrossEntropy {
                            cross_entropy(g, &flat, &labels)
                        } else {
                            focal_loss(g, &flat, &labels, &self.loss_cfg)
                        }
                    }
                    LossKind::McbFocal => {
                        // per-image ratios, batch loss = mean of per-image losses
                        let mut total: Option<Tensor<T>> = None;
                        for (i, s) in batch.iter().enumerate() {
                            let rows = slice_rows(g, &flat, i * hw, hw)?;
                            let labels = OneHotLabels::from_label_map(&s.parse_label, classes)?;
                            let ratios = class_ratios(&s.parse_label, classes)?;
                            let li = mcb_focal_loss(g, &rows, &labels, &ratios, &self.loss_cfg)?;
                            total = Some(match total {
                                None => li,
                                Some(t) => add(g, &t, &li)?,
                            });
                        }
                        scale(g, &total.expect("non-empty batch"), T::from_f64(1.0 / batch.len() as f64))
                    }
                }
            }
        }
    }

    /// Train one stage up to its scheduled epoch count, resuming from the
    /// current progress. Emits one record per epoch (validation metrics are
    /// seg-class metrics in stage 1, parse metrics in stage 2).
    pub fn train_stage(
        &mut self,
        stage: StageId,
        train: &[ParsingSample<T>],
        test: &[ParsingSample<T>],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::EmptyInput("train_stage"));
        }
        let target = match stage {
            StageId::Mask => {
                if self.params.mask.is_none() {
                    return Err(Error::Schedule(
                        "stage 1 trains the mask branch, but this model has none".into(),
                    ));
                }
                self.schedule.stage1_epochs
            }
            StageId::Parse => {
                let needs_stage1 = self.params.mask.is_some() && !self.schedule.from_scratch;
                if needs_stage1 && self.stage1_done == 0 {
                    return Err(Error::Schedule(
                        "stage 2 requires a completed stage 1 (or train.from_scratch = true)"
                            .into(),
                    ));
                }
                self.schedule.stage2_epochs
            }
        };

        let named = self.params.named_params();
        let active = self.active_indices(stage, &named);
        let mut records = Vec::new();

        loop {
            let done = match stage {
                StageId::Mask => self.stage1_done,
                StageId::Parse => self.stage2_done,
            };
            if done >= target {
                break;
            }
            let epoch = done; // 0-based within the stage
            let start = Instant::now();

            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                self.schedule.seed,
                stage.number() as u64,
                epoch as u64,
            ]));
            order.shuffle(&mut shuffle_rng);

            let mut epoch_loss = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(self.schedule.batch_size) {
                let batch: Vec<ParsingSample<T>> = chunk
                    .iter()
                    .map(|&idx| {
                        if self.schedule.augment {
                            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                                self.schedule.seed,
                                stage.number() as u64,
                                epoch as u64,
                                idx as u64,
                            ]));
                            augment(&train[idx], &mut rng)
                        } else {
                            train[idx].clone()
                        }
                    })
                    .collect();
                let refs: Vec<&ParsingSample<T>> = batch.iter().collect();
                let images = stack_images(&refs)?;

                let g = Graph::new();
                let out = model_forward(&g, &images, &self.params)?;
                let logits = match stage {
                    StageId::Mask => out.seg_logits.as_ref().expect("mask branch present"),
                    StageId::Parse => &out.parse_logits,
                };
                let loss = self.batch_loss(&g, stage, &refs, logits)?;
                let loss_val = loss.item().as_f64();
                if !loss_val.is_finite() {
                    return Err(Error::InvalidArgument {
                        op: "train_stage",
                        reason: format!("non-finite loss at stage {} epoch {epoch}", stage.number()),
                    });
                }
                backward(&loss, &g)?;
                adam_step(&named, &active, &mut self.adam)?;

                epoch_loss += loss_val;
                steps += 1;
                self.step_losses.push(loss_val);
            }

            match stage {
                StageId::Mask => self.stage1_done += 1,
                StageId::Parse => self.stage2_done += 1,
            }

            let (miou, macc) = if test.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                match stage {
                    StageId::Mask => {
                        let report = self.evaluate_seg(test)?;
                        (report.mean_iou, report.mean_accuracy)
                    }
                    StageId::Parse => {
                        let report = evaluate_model(&self.params, test)?;
                        (report.mean_iou, report.mean_accuracy)
                    }
                }
            };
            let record = EpochRecord {
                stage: stage.number(),
                epoch: match stage {
                    StageId::Mask => self.stage1_done,
                    StageId::Parse => self.stage2_done,
                },
                loss: epoch_loss / steps.max(1) as f64,
                mean_iou: miou,
                mean_accuracy: macc,
                wall_s: start.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            records.push(record);
        }
        Ok(records)
    }

    /// Mask-branch metrics over the 3 segmentation classes.
    pub fn evaluate_seg(&self, dataset: &[ParsingSample<T>]) -> Result<EvalReport> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("evaluate_seg"));
        }
        let mut m = ConfusionMatrix::new(3);
        for s in dataset {
            let g = Graph::new();
            let image = stack_images(&[s])?;
            let stages = backbone_forward(&g, &image, &self.params)?;
            let logits = mask_branch_forward(&g, &stages[3], &self.params)?;
            let pred = argmax_label_map(&logits)?;
            confusion_update(&mut m, &s.seg_label, &pred)?;
        }
        EvalReport::from_matrix(&m)
    }
}

/// Run the model over a dataset and accumulate one confusion matrix from
/// parse argmax against the parse labels.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[ParsingSample<T>],
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluate_model"));
    }
    let classes = params.config.num_parse_classes;
    let mut m = ConfusionMatrix::new(classes);
    for s in dataset {
        let g = Graph::new();
        let image = stack_images(&[s])?;
        let out = model_forward(&g, &image, params)?;
        let pred = argmax_label_map(&out.parse_logits)?;
        confusion_update(&mut m, &s.parse_label, &pred)?;
    }
    EvalReport::from_matrix(&m)
}

/// Run the model over a dataset and return the per-image argmax label maps.
pub fn predict_label_maps<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[ParsingSample<T>],
) -> Result<Vec<LabelMap>> {
    dataset
        .iter()
        .map(|s| {
            let g = Graph::new();
            let image = stack_images(&[s])?;
            let out = model_forward(&g, &image, params)?;
            argmax_label_map(&out.parse_logits)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SceneConfig};

    fn tiny_model() -> ModelConfig {
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

    fn tiny_scene() -> SceneConfig {
        let mut sc = SceneConfig::default();
        sc.img_size = (32, 32);
        sc
    }

    fn tiny_schedule() -> Schedule {
        let mut s = Schedule::default();
        s.stage1_epochs = 2;
        s.stage2_epochs = 2;
        s.batch_size = 2;
        s.seed = 7;
        s
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // |x| strictly decreases over the first 20 steps when minimizing x^2
        let x = Tensor::param(&[1], vec![1.0f64]).unwrap();
        let named = vec![("x".to_string(), x.clone())];
        let mut state = AdamState::new(&named, &Schedule::default());
        let mut prev = 1.0f64;
        for _ in 0..20 {
            let g = Graph::new();
            let sq = crate::ops::mul(&g, &x, &x).unwrap();
            let loss = crate::ops::sum_all(&g, &sq).unwrap();
            backward(&loss, &g).unwrap();
            adam_step(&named, &[0], &mut state).unwrap();
            let now = x.item().abs();
            assert!(now < prev, "|x| went {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let x = Tensor::param(&[3], vec![0.5f64, -0.25, 2.0]).unwrap();
        let named = vec![("x".to_string(), x.clone())];
        let mut state = AdamState::new(&named, &Schedule::default());
        let g = Graph::new();
        let c = Tensor::new(&[3], vec![3.0f64, -2.0, 0.5]).unwrap();
        let prod = crate::ops::mul(&g, &x, &c).unwrap();
        let loss = crate::ops::sum_all(&g, &prod).unwrap();
        backward(&loss, &g).unwrap();
        let before = x.to_vec();
        adam_step(&named, &[0], &mut state).unwrap();
        let after = x.to_vec();
        for i in 0..3 {
            let step = before[i] - after[i];
            let want = 1e-3 * c.to_vec()[i].signum();
            assert!((step - want).abs() < 1e-6, "step {step} vs {want}");
        }
        // gradients cleared afterward
        assert!(!x.has_grad());
    }

    #[test]
    fn adam_matches_scalar_reference_oracle() {
        // drive one parameter through a fixed gradient trajectory and compare
        // against an independently written scalar Adam
        let x = Tensor::param(&[1], vec![0.3f64]).unwrap();
        let named = vec![("x".to_string(), x.clone())];
        let schedule = Schedule::default();
        let mut state = AdamState::new(&named, &schedule);

        let (mut rm, mut rv, mut rx) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=100u64 {
            let grad = ((t as f64) * 0.37).sin(); // deterministic trajectory
            x.accumulate_grad(|gbuf| gbuf[0] = grad);
            adam_step(&named, &[0], &mut state).unwrap();

            // reference (standard bias-corrected Adam)
            rm = 0.9 * rm + 0.1 * grad;
            rv = 0.999 * rv + 0.001 * grad * grad;
            let mhat = rm / (1.0 - 0.9f64.powi(t as i32));
            let vhat = rv / (1.0 - 0.999f64.powi(t as i32));
            rx -= 1e-3 * mhat / (vhat.sqrt() + 1e-8);
            assert!((x.item() - rx).abs() < 1e-6, "step {t}: {} vs {rx}", x.item());
        }
    }

    #[test]
    fn adam_missing_gradient_rejected() {
        let x = Tensor::param(&[1], vec![1.0f64]).unwrap();
        let named = vec![("x".to_string(), x.clone())];
        let mut state = AdamState::new(&named, &Schedule::default());
        assert!(adam_step(&named, &[0], &mut state).is_err());
    }

    #[test]
    fn stage_order_enforced() {
        let train: Vec<ParsingSample<f32>> =
            generate_dataset(&tiny_scene(), 1, 4, 1).unwrap();
        let mut tr = Trainer::<f32>::new(
            &tiny_model(),
            tiny_schedule(),
            LossConfig::default(),
            LossKind::McbFocal,
        )
        .unwrap();
        let err = tr.train_stage(StageId::Parse, &train, &[], |_| {}).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)), "{err}");

        // with from_scratch the same call is legal
        let mut schedule = tiny_schedule();
        schedule.from_scratch = true;
        let mut tr = Trainer::<f32>::new(
            &tiny_model(),
            schedule,
            LossConfig::default(),
            LossKind::McbFocal,
        )
        .unwrap();
        tr.train_stage(StageId::Parse, &train, &[], |_| {}).unwrap();
    }

    #[test]
    fn training_decreases_seg_loss_moving_average() {
        let train: Vec<ParsingSample<f32>> =
            generate_dataset(&tiny_scene(), 3, 20, 1).unwrap();
        let mut schedule = tiny_schedule();
        schedule.stage1_epochs = 10;
        schedule.batch_size = 2;
        let mut tr = Trainer::<f32>::new(
            &tiny_model(),
            schedule,
            LossConfig::default(),
            LossKind::McbFocal,
        )
        .unwrap();
        tr.train_stage(StageId::Mask, &train, &[], |_| {}).unwrap();
        let losses = &tr.step_losses;
        assert!(losses.len() >= 100, "expected >= 100 steps, got {}", losses.len());
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < head,
            "50-step moving average did not decrease: {head} -> {tail}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let train: Vec<ParsingSample<f32>> =
            generate_dataset(&tiny_scene(), 5, 6, 1).unwrap();
        let test: Vec<ParsingSample<f32>> =
            generate_dataset(&tiny_scene(), 6, 2, 1).unwrap();
        let run = || {
            let mut tr = Trainer::<f32>::new(
                &tiny_model(),
                tiny_schedule(),
                LossConfig::default(),
                LossKind::McbFocal,
            )
            .unwrap();
            tr.train_stage(StageId::Mask, &train, &test, |_| {}).unwrap();
            tr.train_stage(StageId::Parse, &train, &test, |_| {}).unwrap();
            tr.params
                .named_params()
                .iter()
                .flat_map(|(_, t)| t.to_vec())
                .map(|v| v.to_bits())
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_predictions_score_one() {
        // feeding ground truth as predictions drives both metrics to 1
        let data: Vec<ParsingSample<f32>> = generate_dataset(&tiny_scene(), 9, 4, 1).unwrap();
        let mut m = ConfusionMatrix::new(7);
        for s in &data {
            confusion_update(&mut m, &s.parse_label, &s.parse_label).unwrap();
        }
        let report = EvalReport::from_matrix(&m).unwrap();
        assert_eq!(report.mean_iou, 1.0);
        assert_eq!(report.mean_accuracy, 1.0);
    }

    #[test]
    fn evaluate_model_stays_in_unit_interval() {
        let data: Vec<ParsingSample<f32>> = generate_dataset(&tiny_scene(), 11, 3, 1).unwrap();
        let tr = Trainer::<f32>::new(
            &tiny_model(),
            tiny_schedule(),
            LossConfig::default(),
            LossKind::McbFocal,
        )
        .unwrap();
        let report = evaluate_model(&tr.params, &data).unwrap();
        assert!((0.0..=1.0).contains(&report.mean_iou));
        assert!((0.0..=1.0).contains(&report.mean_accuracy));
    }

    #[test]
    fn report_matches_standalone_metrics_on_dumped_predictions() {
        let data: Vec<ParsingSample<f32>> = generate_dataset(&tiny_scene(), 13, 3, 1).unwrap();
        let tr = Trainer::<f32>::new(
            &tiny_model(),
            tiny_schedule(),
            LossConfig::default(),
            LossKind::McbFocal,
        )
        .unwrap();
        let report = evaluate_model(&tr.params, &data).unwrap();
        let preds = predict_label_maps(&tr.params, &data).unwrap();
        let mut m = ConfusionMatrix::new(7);
        for (s, p) in data.iter().zip(&preds) {
            confusion_update(&mut m, &s.parse_label, p).unwrap();
        }
        let standalone = EvalReport::from_matrix(&m).unwrap();
        assert_eq!(report.mean_iou, standalone.mean_iou);
        assert_eq!(report.mean_accuracy, standalone.mean_accuracy);
    }
}
