//! Toy-scale directional ablation harness: trains arms that differ in exactly
//! one component and tabulates their metrics. Absolute numbers on synthetic
//! desk-scale data are not comparable to published results; only directions
//! are meaningful.

use crate::config::{LossKind, RunConfig};
use crate::datagen::ParsingSample;
use crate::dbblock::UpsamplePaths;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::trainer::{evaluate_model, EpochRecord, StageId, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// Baseline FCN vs +parsing branch vs +parsing+mask (Dual-Branch arms).
    DualBranch,
    /// Bilinear-only vs deconv-only vs dual-path upsampling.
    DbBlock,
    /// Cross-entropy vs focal vs multi-class balanced focal.
    Loss,
    /// MCB-FL alpha sweep over {1, 2, 3, 6}.
    Alpha,
}

impl AblationSuite {
    pub fn parse(v: &str) -> Option<AblationSuite> {
        match v.trim().to_ascii_lowercase().as_str() {
            "dual-branch" => Some(AblationSuite::DualBranch),
            "db-block" => Some(AblationSuite::DbBlock),
            "loss" => Some(AblationSuite::Loss),
            "alpha" => Some(AblationSuite::Alpha),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub mean_iou: f64,
    pub mean_accuracy: f64,
}

fn arm_configs(suite: AblationSuite, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut arms = Vec::new();
    match suite {
        AblationSuite::DualBranch => {
            let mut baseline = base.clone();
            baseline.model.use_parsing_branch = false;
            baseline.model.use_mask_branch = false;
            baseline.schedule.from_scratch = true;
            arms.push(("baseline".to_string(), baseline));

            let mut pb = base.clone();
            pb.model.use_parsing_branch = true;
            pb.model.use_mask_branch = false;
            pb.schedule.from_scratch = true;
            arms.push(("+PB".to_string(), pb));

            let mut full = base.clone();
            full.model.use_parsing_branch = true;
            full.model.use_mask_branch = true;
            arms.push(("+PB+MB".to_string(), full));
        }
        AblationSuite::DbBlock => {
            for (name, paths) in [
                ("B", UpsamplePaths::BilinearOnly),
                ("D", UpsamplePaths::DeconvOnly),
                ("DB", UpsamplePaths::Both),
            ] {
                let mut cfg = base.clone();
                cfg.model.db_paths = paths;
                arms.push((name.to_string(), cfg));
            }
        }
        AblationSuite::Loss => {
            for (name, kind) in [
                ("CE", LossKind::CrossEntropy),
                ("FL", LossKind::Focal),
                ("MCB-FL", LossKind::McbFocal),
            ] {
                let mut cfg = base.clone();
                cfg.stage2_loss = kind;
                arms.push((name.to_string(), cfg));
            }
        }
        AblationSuite::Alpha => {
            for alpha in [1.0, 2.0, 3.0, 6.0] {
                let mut cfg = base.clone();
                cfg.stage2_loss = LossKind::McbFocal;
                cfg.loss.alpha = alpha;
                arms.push((format!("alpha={alpha}"), cfg));
            }
        }
    }
    arms
}

/// Train one arm end to end (stage 1 when the arm has a mask branch, then
/// stage 2) and evaluate on the test set.
pub fn run_arm<T: Scalar>(
    name: &str,
    cfg: &RunConfig,
    train: &[ParsingSample<T>],
    test: &[ParsingSample<T>],
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<AblationArm> {
    let mut trainer = Trainer::<T>::new(
        &cfg.model,
        cfg.schedule.clone(),
        cfg.loss,
        cfg.stage2_loss,
    )?;
    if cfg.model.use_mask_branch {
        trainer.train_stage(StageId::Mask, train, test, |r| on_epoch(name, r))?;
    }
    trainer.train_stage(StageId::Parse, train, test, |r| on_epoch(name, r))?;
    let report = evaluate_model(&trainer.params, test)?;
    Ok(AblationArm {
        name: name.to_string(),
        mean_iou: report.mean_iou,
        mean_accuracy: report.mean_accuracy,
    })
}

/// Run every arm of a suite on one shared dataset and seed.
pub fn ablation_suite<T: Scalar>(
    suite: AblationSuite,
    base: &RunConfig,
    train: &[ParsingSample<T>],
    test: &[ParsingSample<T>],
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationArm>> {
    let mut out = Vec::new();
    for (name, cfg) in arm_configs(suite, base) {
        out.push(run_arm(&name, &cfg, train, test, &mut on_epoch)?);
    }
    Ok(out)
}

/// Render the rows the way the ablation tables are laid out, with the
/// non-comparability note attached.
pub fn format_ablation_table(arms: &[AblationArm]) -> String {
    let name_w = arms.iter().map(|a| a.name.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<name_w$}  Mean IoU(%)  Mean Acc.(%)\n", "Method");
    for arm in arms {
        s.push_str(&format!(
            "{:<name_w$}  {:>11.2}  {:>12.2}\n",
            arm.name,
            arm.mean_iou * 100.0,
            arm.mean_accuracy * 100.0
        ));
    }
    s.push_str("note: toy-scale synthetic data; absolute values are not comparable to published results\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SceneConfig};

    fn toy_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.input_size = (32, 32);
        cfg.model.stage_channels = vec![4, 6, 8, 8];
        cfg.model.stage_strides = vec![2, 4, 4, 4];
        cfg.model.crop_size = 8;
        cfg.model.pool_grids = vec![(1, 1), (2, 2)];
        cfg.model.fused_channels = 5;
        cfg.model.num_parse_classes = 7;
        cfg.scene.img_size = (32, 32);
        cfg.schedule.stage1_epochs = 1;
        cfg.schedule.stage2_epochs = 1;
        cfg.schedule.batch_size = 2;
        cfg.schedule.seed = 3;
        cfg
    }

    #[test]
    fn suites_emit_expected_arm_sets() {
        let base = toy_run_config();
        let names =
            |s: AblationSuite| -> Vec<String> { arm_configs(s, &base).into_iter().map(|(n, _)| n).collect() };
        assert_eq!(names(AblationSuite::DualBranch), vec!["baseline", "+PB", "+PB+MB"]);
        assert_eq!(names(AblationSuite::DbBlock), vec!["B", "D", "DB"]);
        assert_eq!(names(AblationSuite::Loss), vec!["CE", "FL", "MCB-FL"]);
        assert_eq!(
            names(AblationSuite::Alpha),
            vec!["alpha=1", "alpha=2", "alpha=3", "alpha=6"]
        );
    }

    #[test]
    fn alpha_sweep_mirrors_published_rows() {
        let base = toy_run_config();
        let alphas: Vec<f64> = arm_configs(AblationSuite::Alpha, &base)
            .iter()
            .map(|(_, c)| c.loss.alpha)
            .collect();
        assert_eq!(alphas, vec![1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn loss_suite_reruns_bit_identically() {
        let cfg = toy_run_config();
        let train = generate_dataset::<f32>(&cfg.scene, 41, 6, 1).unwrap();
        let test = generate_dataset::<f32>(&cfg.scene, 42, 2, 1).unwrap();
        let run = || {
            ablation_suite(AblationSuite::Loss, &cfg, &train, &test, |_, _| {})
                .unwrap()
                .iter()
                .map(|a| (a.name.clone(), a.mean_iou.to_bits(), a.mean_accuracy.to_bits()))
                .collect::<Vec<_>>()
        };
        let t1 = run();
        assert_eq!(t1, run());
        assert_eq!(t1.len(), 3);
    }
}
