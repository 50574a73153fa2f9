//! Dataset persistence: `images/NNNN.msdt`, `parse/NNNN.msdt`,
//! `seg/NNNN.msdt`, plus a flat-key `manifest.txt`.

use std::fs;
use std::path::Path;

use crate::datagen::{project_seg_label, ParsingSample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, TensorPayload};

fn label_payload(m: &LabelMap) -> TensorPayload {
    TensorPayload::U8 {
        shape: vec![m.height(), m.width()],
        data: m.ids().to_vec(),
    }
}

fn write_file(path: &Path, payload: &TensorPayload) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, payload).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<TensorPayload> {
    let buf = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Dataset(format!("missing file {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    read_tensor(&mut buf.as_slice(), &path.display().to_string())
}

/// Write a dataset directory. Images keep their scalar dtype; labels are u8
/// grids. Round-trips are bit-exact.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    samples: &[ParsingSample<T>],
    parts_per_hand: usize,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("save_dataset"));
    }
    let (h, w) = (samples[0].parse_label.height(), samples[0].parse_label.width());
    for sub in ["images", "parse", "seg"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        if s.parse_label.height() != h || s.parse_label.width() != w {
            return Err(Error::Dataset(format!("sample {i} has mismatched size")));
        }
        let name = format!("{i:04}.msdt");
        write_file(
            &dir.join("images").join(&name),
            &TensorPayload::from_tensor(&s.image),
        )?;
        write_file(&dir.join("parse").join(&name), &label_payload(&s.parse_label))?;
        write_file(&dir.join("seg").join(&name), &label_payload(&s.seg_label))?;
    }
    let manifest = format!(
        "count = {}\nheight = {}\nwidth = {}\nparse_classes = {}\nparts_per_hand = {}\n",
        samples.len(),
        h,
        w,
        2 * parts_per_hand + 1,
        parts_per_hand,
    );
    fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.txt"), e))
}

/// Dataset directory metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetManifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub parse_classes: usize,
    pub parts_per_hand: usize,
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let pairs = crate::config::parse_flat_kv(&text)?;
    let get = |key: &str| -> Result<usize> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("manifest missing {key}"),
            })?
            .1
            .parse::<usize>()
            .map_err(|_| Error::Format {
                path: path.clone(),
                reason: format!("manifest {key} not an integer"),
            })
    };
    Ok(DatasetManifest {
        count: get("count")?,
        height: get("height")?,
        width: get("width")?,
        parse_classes: get("parse_classes")?,
        parts_per_hand: get("parts_per_hand")?,
    })
}

/// Load a dataset directory, validating shapes, label ranges, and the
/// seg/parse projection invariant. Errors name the offending index.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetManifest, Vec<ParsingSample<T>>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let name = format!("{i:04}.msdt");
        let image = read_file(&dir.join("images").join(&name))?
            .into_tensor::<T>()
            .map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
        if image.shape() != [3, manifest.height, manifest.width] {
            return Err(Error::Dataset(format!(
                "sample {i}: image shape {:?} does not match manifest",
                image.shape()
            )));
        }
        let to_label = |payload: TensorPayload, which: &str| -> Result<LabelMap> {
            match payload {
                TensorPayload::U8 { shape, data } if shape.len() == 2 => {
                    if shape != [manifest.height, manifest.width] {
                        return Err(Error::Dataset(format!(
                            "sample {i}: {which} label shape {shape:?} does not match manifest"
                        )));
                    }
                    LabelMap::new(shape[0], shape[1], data)
                }
                _ => Err(Error::Dataset(format!(
                    "sample {i}: {which} label is not a u8 grid"
                ))),
            }
        };
        let parse_label = to_label(read_file(&dir.join("parse").join(&name))?, "parse")?;
        let seg_label = to_label(read_file(&dir.join("seg").join(&name))?, "seg")?;
        parse_label
            .check_classes(manifest.parse_classes)
            .map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
        seg_label
            .check_classes(3)
            .map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
        if project_seg_label(&parse_label, manifest.parts_per_hand) != seg_label {
            return Err(Error::Dataset(format!(
                "sample {i}: seg label is not the projection of the parse label"
            )));
        }
        samples.push(ParsingSample {
            image,
            parse_label,
            seg_label,
        });
    }
    Ok((manifest, samples))
}
