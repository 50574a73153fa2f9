//! Flat dotted-key experiment configuration: a line-oriented `key = value`
//! text format, a full-run config struct, and flag overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::datagen::SceneConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::Schedule;

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Order is preserved and duplicate keys keep their last value at apply time.
pub fn parse_flat_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value': {raw:?}", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Which loss stage 2 trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Focal,
    McbFocal,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "fl",
            LossKind::McbFocal => "mcb-fl",
        }
    }

    pub fn parse(v: &str) -> Result<LossKind> {
        match v.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "fl" | "focal" => Ok(LossKind::Focal),
            "mcb-fl" | "mcb" => Ok(LossKind::McbFocal),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Everything a run needs: model architecture, scene generation, loss, and
/// schedule, plus data/output paths. Every tunable has a dotted key; unknown
/// keys are rejected.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub stage2_loss: LossKind,
    pub train_count: usize,
    pub test_count: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            stage2_loss: LossKind::McbFocal,
            train_count: 200,
            test_count: 50,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: expected number, got {v:?}")))
        };
        if key.starts_with("model.") {
            return self.model.set_key(key, value);
        }
        if key.starts_with("scene.") {
            return self.scene.set_key(key, value);
        }
        if key.starts_with("train.") {
            return self.schedule.set_key(key, value);
        }
        match key {
            "loss.alpha" => self.loss.alpha = parse_f64(value)?,
            "loss.gamma" => self.loss.gamma = parse_f64(value)?,
            "loss.alpha_t" => self.loss.alpha_t = parse_f64(value)?,
            "loss.clamp_eps" => self.loss.clamp_eps = parse_f64(value)?,
            "loss.kind" => self.stage2_loss = LossKind::parse(value)?,
            "data.train_count" => self.train_count = parse_usize(value)?,
            "data.test_count" => self.test_count = parse_usize(value)?,
            "paths.data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "paths.out_dir" => self.out_dir = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set_key(k, v)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_kv(&parse_flat_kv(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("train/test counts must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved flat-key dump; every run logs this.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.model.to_kv());
        s.push_str(&self.scene.to_kv());
        let _ = write!(
            s,
            "loss.kind = {}\nloss.alpha = {}\nloss.gamma = {}\nloss.alpha_t = {}\nloss.clamp_eps = {}\n",
            self.stage2_loss.name(),
            self.loss.alpha,
            self.loss.gamma,
            self.loss.alpha_t,
            self.loss.clamp_eps
        );
        s.push_str(&self.schedule.to_kv());
        let _ = write!(
            s,
            "data.train_count = {}\ndata.test_count = {}\npaths.data_dir = {}\npaths.out_dir = {}\n",
            self.train_count,
            self.test_count,
            self.data_dir.display(),
            self.out_dir.display()
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_handles_comments_and_blanks() {
        let text = "# a comment\n\nmodel.crop_size = 16\n  loss.alpha = 2.5  \n";
        let kv = parse_flat_kv(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("model.crop_size".to_string(), "16".to_string()),
                ("loss.alpha".to_string(), "2.5".to_string())
            ]
        );
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(parse_flat_kv("novalue\n").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set_key("nonsense.key", "1").is_err());
    }

    #[test]
    fn full_roundtrip_through_kv() {
        let mut cfg = RunConfig::default();
        cfg.set_key("model.crop_size", "16").unwrap();
        cfg.set_key("loss.alpha", "6").unwrap();
        cfg.set_key("loss.kind", "fl").unwrap();
        cfg.set_key("data.train_count", "20").unwrap();

        let dump = cfg.to_kv();
        let mut back = RunConfig::default();
        back.apply_kv(&parse_flat_kv(&dump).unwrap()).unwrap();
        assert_eq!(back.model.crop_size, 16);
        assert_eq!(back.loss.alpha, 6.0);
        assert_eq!(back.stage2_loss, LossKind::Focal);
        assert_eq!(back.train_count, 20);
    }
}
