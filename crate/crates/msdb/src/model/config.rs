//! Model architecture configuration and its flat-key text form.

use crate::dbblock::UpsamplePaths;
use crate::error::{Error, Result};

/// How the mask posterior is fused into the parsing branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Concatenate the downsampled posterior as extra channels (default).
    Concat,
    /// Project the posterior to the fused width and add it.
    Add,
}

/// Full architecture description. `Default` is the reference configuration:
/// 64x64 inputs, four backbone stages at cumulative strides (4,8,8,8) with
/// dilations (1,2,4) keeping the last three stages at one resolution, a 32x32
/// crop, pyramid grids {1,2,3,6}, and 33 parse classes (32 parts plus
/// background).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub stage_channels: Vec<usize>,
    /// Cumulative downsampling factor of each stage relative to the input.
    pub stage_strides: Vec<usize>,
    /// Dilation rates of the last three stages.
    pub dilations: Vec<usize>,
    pub num_parse_classes: usize,
    pub num_seg_classes: usize,
    pub crop_size: usize,
    pub pool_grids: Vec<(usize, usize)>,
    /// Channel width the stage projections emit (the fusion block runs at
    /// this width plus the prior channels when the mask branch is present).
    pub fused_channels: usize,
    /// Non-background posterior threshold for hand localization.
    pub loc_threshold: f64,
    /// Box expansion fraction after localization.
    pub loc_margin: f64,
    pub prior_mode: PriorMode,
    pub db_paths: UpsamplePaths,
    /// Background logit pasted outside the reconstructed box.
    pub bg_logit: f64,
    pub use_parsing_branch: bool,
    pub use_mask_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (64, 64),
            stage_channels: vec![12, 24, 32, 32],
            stage_strides: vec![4, 8, 8, 8],
            dilations: vec![1, 2, 4],
            num_parse_classes: 33,
            num_seg_classes: 3,
            crop_size: 32,
            pool_grids: vec![(1, 1), (2, 2), (3, 3), (6, 6)],
            fused_channels: 16,
            loc_threshold: 0.5,
            loc_margin: 0.1,
            prior_mode: PriorMode::Concat,
            db_paths: UpsamplePaths::Both,
            bg_logit: 10.0,
            use_parsing_branch: true,
            use_mask_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Config(reason);
        if self.stage_channels.len() != 4 || self.stage_strides.len() != 4 {
            return Err(err("backbone needs exactly 4 stages".into()));
        }
        if self.dilations.len() != 3 {
            return Err(err("need dilation rates for the last three stages".into()));
        }
        let mut prev = 1;
        for (i, &s) in self.stage_strides.iter().enumerate() {
            if s < prev || s % prev != 0 || !matches!(s / prev, 1 | 2 | 4) {
                return Err(err(format!(
                    "stage {i} stride {s} not a 1/2/4x step from {prev}"
                )));
            }
            prev = s;
        }
        if self.stage_strides[1] != self.stage_strides[2]
            || self.stage_strides[2] != self.stage_strides[3]
        {
            return Err(err(
                "last three stages must share one resolution (dilation instead of stride)".into(),
            ));
        }
        let (h, w) = self.input_size;
        let s_max = *self.stage_strides.last().unwrap();
        if h == 0 || w == 0 || h % s_max != 0 || w % s_max != 0 {
            return Err(err(format!(
                "input {h}x{w} not divisible by final stride {s_max}"
            )));
        }
        if self.num_parse_classes < 2 || self.num_seg_classes != 3 {
            return Err(err("need >= 2 parse classes and exactly 3 seg classes".into()));
        }
        if self.pool_grids.is_empty() {
            return Err(err("need at least one pyramid pool grid".into()));
        }
        for &(gh, gw) in &self.pool_grids {
            if gh == 0 || gw == 0 || gh > self.crop_size || gw > self.crop_size {
                return Err(err(format!(
                    "pool grid {gh}x{gw} invalid for crop size {}",
                    self.crop_size
                )));
            }
        }
        if self.fused_channels == 0 {
            return Err(err("fused_channels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.loc_threshold) || !(0.0..=1.0).contains(&self.loc_margin) {
            return Err(err("loc_threshold and loc_margin must lie in [0,1]".into()));
        }
        if self.use_mask_branch && !self.use_parsing_branch {
            return Err(err(
                "the mask branch feeds the parsing branch; enable use_parsing_branch".into(),
            ));
        }
        Ok(())
    }

    /// Spatial size of stage `i`'s output (0-based).
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        (
            self.input_size.0 / self.stage_strides[i],
            self.input_size.1 / self.stage_strides[i],
        )
    }

    /// Feature resolution the parsing branch operates at (shared by the last
    /// three stages).
    pub fn feature_size(&self) -> (usize, usize) {
        self.stage_size(3)
    }

    /// Channel width entering the fusion block and classifier.
    pub fn fusion_width(&self) -> usize {
        match (self.use_mask_branch, self.prior_mode) {
            (true, PriorMode::Concat) => self.fused_channels + self.num_seg_classes,
            _ => self.fused_channels,
        }
    }

    /// Serialize as `model.*` flat keys.
    pub fn to_kv(&self) -> String {
        let grids = self
            .pool_grids
            .iter()
            .map(|&(h, w)| format!("{h}x{w}"))
            .collect::<Vec<_>>()
            .join(",");
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "model.input_h = {}\nmodel.input_w = {}\nmodel.stage_channels = {}\nmodel.stage_strides = {}\nmodel.dilations = {}\nmodel.parse_classes = {}\nmodel.seg_classes = {}\nmodel.crop_size = {}\nmodel.pool_grids = {}\nmodel.fused_channels = {}\nmodel.loc_threshold = {}\nmodel.loc_margin = {}\nmodel.prior_mode = {}\nmodel.db_paths = {}\nmodel.bg_logit = {}\nmodel.use_parsing_branch = {}\nmodel.use_mask_branch = {}\n",
            self.input_size.0,
            self.input_size.1,
            list(&self.stage_channels),
            list(&self.stage_strides),
            list(&self.dilations),
            self.num_parse_classes,
            self.num_seg_classes,
            self.crop_size,
            grids,
            self.fused_channels,
            self.loc_threshold,
            self.loc_margin,
            match self.prior_mode {
                PriorMode::Concat => "concat",
                PriorMode::Add => "add",
            },
            match self.db_paths {
                UpsamplePaths::Both => "both",
                UpsamplePaths::DeconvOnly => "deconv",
                UpsamplePaths::BilinearOnly => "bilinear",
            },
            self.bg_logit,
            self.use_parsing_branch,
            self.use_mask_branch,
        )
    }

    /// Apply one `model.*` key. Unknown keys are an error.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::Config(reason);
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
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
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',').map(|p| parse_usize(p)).collect()
        };
        match key {
            "model.input_h" => self.input_size.0 = parse_usize(value)?,
            "model.input_w" => self.input_size.1 = parse_usize(value)?,
            "model.stage_channels" => self.stage_channels = parse_list(value)?,
            "model.stage_strides" => self.stage_strides = parse_list(value)?,
            "model.dilations" => self.dilations = parse_list(value)?,
            "model.parse_classes" => self.num_parse_classes = parse_usize(value)?,
            "model.seg_classes" => self.num_seg_classes = parse_usize(value)?,
            "model.crop_size" => self.crop_size = parse_usize(value)?,
            "model.pool_grids" => {
                let mut grids = Vec::new();
                for part in value.split(',') {
                    let (h, w) = part
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| bad(format!("{key}: grid {part:?} not HxW")))?;
                    grids.push((parse_usize(h)?, parse_usize(w)?));
                }
                self.pool_grids = grids;
            }
            "model.fused_channels" => self.fused_channels = parse_usize(value)?,
            "model.loc_threshold" => self.loc_threshold = parse_f64(value)?,
            "model.loc_margin" => self.loc_margin = parse_f64(value)?,
            "model.prior_mode" => {
                self.prior_mode = match value.trim() {
                    "concat" => PriorMode::Concat,
                    "add" => PriorMode::Add,
                    other => return Err(bad(format!("{key}: unknown mode {other:?}"))),
                }
            }
            "model.db_paths" => {
                self.db_paths = match value.trim() {
                    "both" => UpsamplePaths::Both,
                    "deconv" => UpsamplePaths::DeconvOnly,
                    "bilinear" => UpsamplePaths::BilinearOnly,
                    other => return Err(bad(format!("{key}: unknown paths {other:?}"))),
                }
            }
            "model.bg_logit" => self.bg_logit = parse_f64(value)?,
            "model.use_parsing_branch" => self.use_parsing_branch = parse_bool(value)?,
            "model.use_mask_branch" => self.use_mask_branch = parse_bool(value)?,
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_flat_kv;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn default_stage_sizes_match_contract() {
        // 64x64 input, strides (4,8,8,8) -> 16x16, 8x8, 8x8, 8x8
        let c = ModelConfig::default();
        assert_eq!(c.stage_size(0), (16, 16));
        assert_eq!(c.stage_size(1), (8, 8));
        assert_eq!(c.stage_size(2), (8, 8));
        assert_eq!(c.stage_size(3), (8, 8));
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::default();
        c.input_size = (32, 48);
        c.stage_strides = vec![2, 4, 4, 4];
        c.pool_grids = vec![(1, 1), (3, 3)];
        c.db_paths = UpsamplePaths::DeconvOnly;
        c.use_mask_branch = false;
        c.use_parsing_branch = true;

        let text = c.to_kv();
        let mut back = ModelConfig::default();
        for (k, v) in parse_flat_kv(&text).unwrap() {
            back.set_key(&k, &v).unwrap();
        }
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = ModelConfig::default();
        assert!(c.set_key("model.bogus", "1").is_err());
    }

    #[test]
    fn mask_without_parsing_rejected() {
        let mut c = ModelConfig::default();
        c.use_parsing_branch = false;
        assert!(c.validate().is_err());
        c.use_mask_branch = false;
        c.validate().unwrap();
    }
}
