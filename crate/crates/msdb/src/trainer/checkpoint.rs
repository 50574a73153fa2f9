//! Checkpoints: tensor containers wrapped with an ordered name manifest, the
//! model configuration, optimizer state, and stage progress. Reloads are
//! bit-exact and resumed runs reproduce the uninterrupted run exactly.

use std::io::Read;
use std::path::Path;

use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, TensorPayload};
use crate::trainer::{AdamState, Schedule, Trainer};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u8 = 1;

/// Progress markers stored alongside the tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub stage1_done: usize,
    pub stage2_done: usize,
    pub adam_step: u64,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let mut head = String::new();
    head.push_str(&trainer.params.config.to_kv());
    head.push_str(&format!(
        "progress.stage1_done = {}\nprogress.stage2_done = {}\nprogress.adam_step = {}\n",
        trainer.stage1_done, trainer.stage2_done, trainer.adam.step
    ));

    let named = trainer.params.named_params();
    let mut entries: Vec<(String, TensorPayload)> = Vec::with_capacity(named.len() * 3);
    for (name, t) in &named {
        entries.push((name.clone(), TensorPayload::from_tensor(t)));
    }
    for (kind, moments) in [("m", &trainer.adam.m), ("v", &trainer.adam.v)] {
        for ((name, t), buf) in named.iter().zip(moments) {
            let tensor = crate::tensor::Tensor::new(t.shape(), buf.clone())?;
            entries.push((format!("adam.{kind}.{name}"), TensorPayload::from_tensor(&tensor)));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(head.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, payload) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, payload).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuild a trainer from a checkpoint. The schedule and loss settings come
/// from the caller (they are run configuration, not model state); parameters,
/// optimizer moments, and stage progress come from the file.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    schedule: Schedule,
    loss_cfg: LossConfig,
    stage2_loss: LossKind,
) -> Result<(Trainer<T>, CheckpointMeta)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut cursor = buf.as_slice();

    let mut head5 = [0u8; 5];
    cursor.read_exact(&mut head5).map_err(|e| Error::io(path, e))?;
    if &head5[0..4] != MAGIC {
        return Err(fail("bad magic, expected MSCK".into()));
    }
    if head5[4] != VERSION {
        return Err(fail(format!("unsupported version {}", head5[4])));
    }
    let mut len8 = [0u8; 8];
    cursor.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
    let head_len = u64::from_le_bytes(len8) as usize;
    if cursor.len() < head_len {
        return Err(fail("truncated header".into()));
    }
    let head = std::str::from_utf8(&cursor[..head_len])
        .map_err(|_| fail("header is not utf-8".into()))?
        .to_string();
    cursor = &cursor[head_len..];

    let mut config = ModelConfig::default();
    let mut meta = CheckpointMeta {
        stage1_done: 0,
        stage2_done: 0,
        adam_step: 0,
    };
    for (k, v) in crate::config::parse_flat_kv(&head)? {
        match k.as_str() {
            "progress.stage1_done" => {
                meta.stage1_done = v.parse().map_err(|_| fail(format!("bad {k}")))?
            }
            "progress.stage2_done" => {
                meta.stage2_done = v.parse().map_err(|_| fail(format!("bad {k}")))?
            }
            "progress.adam_step" => {
                meta.adam_step = v.parse().map_err(|_| fail(format!("bad {k}")))?
            }
            _ => config.set_key(&k, &v)?,
        }
    }

    let mut cnt4 = [0u8; 4];
    cursor.read_exact(&mut cnt4).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(cnt4) as usize;
    let mut entries: Vec<(String, Vec<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        cursor.read_exact(&mut len2).map_err(|e| Error::io(path, e))?;
        let name_len = u16::from_le_bytes(len2) as usize;
        if cursor.len() < name_len {
            return Err(fail("truncated tensor name".into()));
        }
        let name = std::str::from_utf8(&cursor[..name_len])
            .map_err(|_| fail("tensor name is not utf-8".into()))?
            .to_string();
        cursor = &cursor[name_len..];
        let payload = read_tensor(&mut cursor, &path.display().to_string())?;
        let tensor = payload.into_tensor::<T>()?;
        entries.push((name, tensor.to_vec()));
    }

    // Rebuild parameters, then overwrite every value from the file.
    let params = ModelParams::<T>::init(&config, 0)?;
    let named = params.named_params();
    let param_entries: Vec<(String, Vec<T>)> =
        entries.iter().take(named.len()).cloned().collect();
    params.load_named(&param_entries)?;

    let mut adam = AdamState::new(&named, &schedule);
    adam.step = meta.adam_step;
    for (kind, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
        for (i, (name, t)) in named.iter().enumerate() {
            let want = format!("adam.{kind}.{name}");
            let entry = entries
                .iter()
                .find(|(n, _)| *n == want)
                .ok_or_else(|| fail(format!("checkpoint missing {want}")))?;
            if entry.1.len() != t.len() {
                return Err(fail(format!("bad length for {want}")));
            }
            moments[i].copy_from_slice(&entry.1);
        }
    }

    let trainer = Trainer {
        params,
        schedule,
        loss_cfg,
        stage2_loss,
        adam,
        stage1_done: meta.stage1_done,
        stage2_done: meta.stage2_done,
        step_losses: Vec::new(),
    };
    Ok((trainer, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ParsingSample, SceneConfig};
    use crate::trainer::StageId;

    fn tiny_setup() -> (ModelConfig, SceneConfig, Schedule) {
        let mut cfg = ModelConfig::default();
        cfg.input_size = (32, 32);
        cfg.stage_channels = vec![4, 6, 8, 8];
        cfg.stage_strides = vec![2, 4, 4, 4];
        cfg.crop_size = 8;
        cfg.pool_grids = vec![(1, 1), (2, 2)];
        cfg.fused_channels = 5;
        cfg.num_parse_classes = 7;
        let mut sc = SceneConfig::default();
        sc.img_size = (32, 32);
        let mut schedule = Schedule::default();
        schedule.stage1_epochs = 2;
        schedule.stage2_epochs = 3;
        schedule.batch_size = 2;
        schedule.seed = 21;
        (cfg, sc, schedule)
    }

    fn param_bits(tr: &Trainer<f32>) -> Vec<u32> {
        tr.params
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.to_vec())
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let (cfg, sc, schedule) = tiny_setup();
        let train: Vec<ParsingSample<f32>> = generate_dataset(&sc, 31, 4, 1).unwrap();
        let mut tr =
            Trainer::<f32>::new(&cfg, schedule.clone(), LossConfig::default(), LossKind::McbFocal)
                .unwrap();
        tr.train_stage(StageId::Mask, &train, &[], |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.msck");
        save_checkpoint(&path, &tr).unwrap();
        let (loaded, meta) =
            load_checkpoint::<f32>(&path, schedule, LossConfig::default(), LossKind::McbFocal)
                .unwrap();
        assert_eq!(meta.stage1_done, 2);
        assert_eq!(param_bits(&tr), param_bits(&loaded));
        assert_eq!(tr.adam.step, loaded.adam.step);
        for (a, b) in tr.adam.m.iter().zip(&loaded.adam.m) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (cfg, sc, schedule) = tiny_setup();
        let train: Vec<ParsingSample<f32>> = generate_dataset(&sc, 33, 4, 1).unwrap();

        // uninterrupted: full stage 1 then stage 2
        let mut full =
            Trainer::<f32>::new(&cfg, schedule.clone(), LossConfig::default(), LossKind::McbFocal)
                .unwrap();
        full.train_stage(StageId::Mask, &train, &[], |_| {}).unwrap();
        full.train_stage(StageId::Parse, &train, &[], |_| {}).unwrap();

        // interrupted: stage 1, checkpoint, stage 2 split across a reload
        let mut first =
            Trainer::<f32>::new(&cfg, schedule.clone(), LossConfig::default(), LossKind::McbFocal)
                .unwrap();
        first.train_stage(StageId::Mask, &train, &[], |_| {}).unwrap();
        let mut sched_half = schedule.clone();
        sched_half.stage2_epochs = 1;
        first.schedule = sched_half;
        first.train_stage(StageId::Parse, &train, &[], |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.msck");
        save_checkpoint(&path, &first).unwrap();

        let (mut resumed, meta) =
            load_checkpoint::<f32>(&path, schedule, LossConfig::default(), LossKind::McbFocal)
                .unwrap();
        assert_eq!(meta.stage2_done, 1);
        resumed.train_stage(StageId::Parse, &train, &[], |_| {}).unwrap();

        assert_eq!(param_bits(&full), param_bits(&resumed));
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let (cfg, _, schedule) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let mk = || {
            Trainer::<f32>::new(&cfg, schedule.clone(), LossConfig::default(), LossKind::McbFocal)
                .unwrap()
        };
        let (p1, p2) = (dir.path().join("a.msck"), dir.path().join("b.msck"));
        save_checkpoint(&p1, &mk()).unwrap();
        save_checkpoint(&p2, &mk()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
