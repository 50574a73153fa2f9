//! Synthetic articulated-hand scenes: chained elliptical finger segments with
//! self-occlusion and low inter-part contrast over a cluttered background,
//! plus the augmentation pipeline and class-proportion statistics.

mod store;

pub use store::{load_dataset, save_dataset};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which hands appear in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hands {
    Left,
    Right,
    Both,
}

/// Scene-generation knobs shared by a whole dataset. Per-sample variation
/// comes from [`SceneSpec::seed`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub img_size: (usize, usize),
    /// Parts per hand P; parse classes are 2P + 1 (background + left parts
    /// 1..=P + right parts P+1..=2P).
    pub parts_per_hand: usize,
    pub hands: Hands,
    /// Part radius range as a fraction of the smaller image dimension.
    pub radius_range: (f64, f64),
    /// Background clutter level in [0, 1] (scales distractor blob count).
    pub clutter: f64,
    /// Amplitude of the per-part color offset; small values keep parts
    /// low-contrast against each other.
    pub palette_contrast: f64,
    /// Acceptable background pixel fraction; generation rescales part sizes
    /// until the rendered scene lands inside.
    pub bg_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            img_size: (64, 64),
            parts_per_hand: 3,
            hands: Hands::Both,
            radius_range: (0.11, 0.17),
            clutter: 0.5,
            palette_contrast: 0.06,
            bg_range: (0.55, 0.97),
        }
    }
}

impl SceneConfig {
    pub fn parse_classes(&self) -> usize {
        2 * self.parts_per_hand + 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Error::Config(m);
        if self.parts_per_hand < 2 {
            return Err(err("parts_per_hand must be >= 2".into()));
        }
        if self.img_size.0 < 32 || self.img_size.1 < 32 {
            return Err(err("scene images must be at least 32x32".into()));
        }
        if self.parse_classes() > 256 {
            return Err(err("too many part classes for u8 labels".into()));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && hi >= lo && hi < 0.5) {
            return Err(err(format!("bad radius range ({lo}, {hi})")));
        }
        let (blo, bhi) = self.bg_range;
        if !(blo > 0.0 && bhi > blo && bhi <= 1.0) {
            return Err(err(format!("bad background range ({blo}, {bhi})")));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(err("clutter must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "scene.img_h = {}\nscene.img_w = {}\nscene.parts_per_hand = {}\nscene.hands = {}\nscene.radius_lo = {}\nscene.radius_hi = {}\nscene.clutter = {}\nscene.palette_contrast = {}\nscene.bg_lo = {}\nscene.bg_hi = {}\n",
            self.img_size.0,
            self.img_size.1,
            self.parts_per_hand,
            match self.hands {
                Hands::Left => "left",
                Hands::Right => "right",
                Hands::Both => "both",
            },
            self.radius_range.0,
            self.radius_range.1,
            self.clutter,
            self.palette_contrast,
            self.bg_range.0,
            self.bg_range.1,
        )
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |m: String| Error::Config(m);
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
        match key {
            "scene.img_h" => self.img_size.0 = parse_usize(value)?,
            "scene.img_w" => self.img_size.1 = parse_usize(value)?,
            "scene.parts_per_hand" => self.parts_per_hand = parse_usize(value)?,
            "scene.hands" => {
                self.hands = match value.trim() {
                    "left" => Hands::Left,
                    "right" => Hands::Right,
                    "both" => Hands::Both,
                    other => return Err(bad(format!("{key}: unknown hands {other:?}"))),
                }
            }
            "scene.radius_lo" => self.radius_range.0 = parse_f64(value)?,
            "scene.radius_hi" => self.radius_range.1 = parse_f64(value)?,
            "scene.clutter" => self.clutter = parse_f64(value)?,
            "scene.palette_contrast" => self.palette_contrast = parse_f64(value)?,
            "scene.bg_lo" => self.bg_range.0 = parse_f64(value)?,
            "scene.bg_hi" => self.bg_range.1 = parse_f64(value)?,
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Full description of one scene; equal specs yield bit-identical samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub scene: SceneConfig,
}

/// One image with parsing and segmentation labels. The seg label is always
/// the deterministic projection of the parse label (left parts -> 1, right
/// parts -> 2, background -> 0).
#[derive(Clone, Debug)]
pub struct ParsingSample<T: Scalar> {
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor<T>,
    pub parse_label: LabelMap,
    pub seg_label: LabelMap,
}

/// Project a parse label onto {0 bg, 1 left, 2 right}.
pub fn project_seg_label(parse: &LabelMap, parts_per_hand: usize) -> LabelMap {
    let p = parts_per_hand as u8;
    let ids = parse
        .ids()
        .iter()
        .map(|&id| {
            if id == 0 {
                0
            } else if id <= p {
                1
            } else {
                2
            }
        })
        .collect();
    LabelMap::new(parse.height(), parse.width(), ids).expect("same geometry")
}

/// Human-readable class name for a parse id.
pub fn class_name(id: usize, parts_per_hand: usize) -> String {
    if id == 0 {
        "background".into()
    } else if id <= parts_per_hand {
        format!("left_{id}")
    } else {
        format!("right_{}", id - parts_per_hand)
    }
}

struct Canvas<T> {
    h: usize,
    w: usize,
    rgb: Vec<T>,
    label: Vec<u8>,
}

impl<T: Scalar> Canvas<T> {
    fn paint_ellipse(
        &mut self,
        cy: f64,
        cx: f64,
        r_major: f64,
        r_minor: f64,
        angle: f64,
        color: [f64; 3],
        label: Option<u8>,
    ) {
        let (sin_a, cos_a) = angle.sin_cos();
        let reach = r_major.max(r_minor) + 1.0;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(self.h as f64 - 1.0)) as usize;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(self.w as f64 - 1.0)) as usize;
        let hw = self.h * self.w;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = dx * cos_a + dy * sin_a;
                let v = -dx * sin_a + dy * cos_a;
                if (u / r_major).powi(2) + (v / r_minor).powi(2) <= 1.0 {
                    let p = y * self.w + x;
                    for c in 0..3 {
                        self.rgb[c * hw + p] = T::from_f64(color[c].clamp(0.0, 1.0));
                    }
                    if let Some(id) = label {
                        self.label[p] = id;
                    }
                }
            }
        }
    }
}

fn render_attempt<T: Scalar>(
    spec: &SceneSpec,
    size: (usize, usize),
    radius_scale: f64,
    attempt: u64,
) -> (Vec<T>, Vec<u8>) {
    let cfg = &spec.scene;
    let (h, w) = size;
    let min_dim = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![T::zero(); 3 * h * w],
        label: vec![0u8; h * w],
    };

    // Background: soft vertical gradient around a random base color.
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
    ];
    let tilt = rng.gen_range(-0.08..0.08);
    let hw = h * w;
    for y in 0..h {
        let shade = tilt * (y as f64 / h as f64 - 0.5);
        for x in 0..w {
            for c in 0..3 {
                canvas.rgb[c * hw + y * w + x] = T::from_f64((base[c] + shade).clamp(0.0, 1.0));
            }
        }
    }

    // Clutter: distractor blobs that stay labeled background.
    let blobs = (cfg.clutter * 8.0).round() as usize;
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let r = rng.gen_range(0.04..0.18) * min_dim;
        let aspect = rng.gen_range(0.5..1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let color = [
            (base[0] + rng.gen_range(-0.18..0.18)).clamp(0.0, 1.0),
            (base[1] + rng.gen_range(-0.18..0.18)).clamp(0.0, 1.0),
            (base[2] + rng.gen_range(-0.18..0.18)).clamp(0.0, 1.0),
        ];
        canvas.paint_ellipse(cy, cx, r, r * aspect, angle, color, None);
    }

    // Hands: chained overlapping elliptical segments, drawn in part order so
    // later parts occlude earlier ones.
    let p = cfg.parts_per_hand;
    let hands: &[(Hands, u8)] = match cfg.hands {
        Hands::Left => &[(Hands::Left, 1)],
        Hands::Right => &[(Hands::Right, 2)],
        Hands::Both => &[(Hands::Left, 1), (Hands::Right, 2)],
    };
    for &(side, seg_id) in hands {
        // Skin-like base tone shared across the hand's parts.
        let hand_color = [
            rng.gen_range(0.55..0.8),
            rng.gen_range(0.38..0.55),
            rng.gen_range(0.3..0.48),
        ];
        let max_r = cfg.radius_range.1 * min_dim * radius_scale;
        let (x_lo, x_hi) = match side {
            Hands::Left => (max_r + 1.0, w as f64 * 0.5 - max_r),
            Hands::Right => (w as f64 * 0.5 + max_r, w as f64 - max_r - 1.0),
            Hands::Both => unreachable!(),
        };
        let mut cy = rng.gen_range(max_r + 1.0..h as f64 - max_r - 1.0);
        let mut cx = rng.gen_range(x_lo..x_hi.max(x_lo + 1.0));
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        for part in 0..p {
            let r = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1)
                * min_dim
                * radius_scale;
            let aspect = rng.gen_range(0.55..0.85);
            let offset = rng.gen_range(-1.0..1.0) * cfg.palette_contrast;
            let color = [
                hand_color[0] + offset,
                hand_color[1] + offset * 0.8,
                hand_color[2] + offset * 0.6,
            ];
            let parse_id = match side {
                Hands::Left => 1 + part as u8,
                Hands::Right => (p + 1 + part) as u8,
                Hands::Both => unreachable!(),
            };
            debug_assert!(parse_id >= 1 && (parse_id as usize) <= 2 * p && seg_id <= 2);
            canvas.paint_ellipse(cy, cx, r, r * aspect, angle, color, Some(parse_id));

            // advance the chain with overlap, staying inside the frame
            angle += rng.gen_range(-0.6..0.6);
            let step = r * rng.gen_range(0.9..1.3);
            cy = (cy + step * angle.sin()).clamp(max_r, h as f64 - max_r - 1.0);
            cx = (cx + step * angle.cos()).clamp(max_r, w as f64 - max_r - 1.0);
        }
    }

    // Light pixel noise over everything; labels untouched.
    for v in canvas.rgb.iter_mut() {
        let n = rng.gen_range(-0.02..0.02);
        *v = T::from_f64((v.as_f64() + n).clamp(0.0, 1.0));
    }

    (canvas.rgb, canvas.label)
}

/// Render one scene. A pure function of the spec: equal specs yield
/// bit-identical samples. Part sizes are rescaled (deterministically) until
/// the background fraction lands inside the configured range.
pub fn generate_scene<T: Scalar>(spec: &SceneSpec, size: (usize, usize)) -> Result<ParsingSample<T>> {
    spec.scene.validate()?;
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::Dataset(format!(
            "scene size {h}x{w} below the 32x32 minimum"
        )));
    }

    let (blo, bhi) = spec.scene.bg_range;
    let mut radius_scale = 1.0f64;
    for attempt in 0..12u64 {
        let (rgb, label) = render_attempt::<T>(spec, size, radius_scale, attempt);
        let bg = label.iter().filter(|&&v| v == 0).count() as f64 / label.len() as f64;
        if bg >= blo && bg <= bhi {
            let parse_label = LabelMap::new(h, w, label)?;
            let seg_label = project_seg_label(&parse_label, spec.scene.parts_per_hand);
            return Ok(ParsingSample {
                image: Tensor::new(&[3, h, w], rgb)?,
                parse_label,
                seg_label,
            });
        }
        // hands too large -> shrink; too small -> grow
        radius_scale *= if bg < blo { 0.82 } else { 1.22 };
    }
    Err(Error::Dataset(format!(
        "could not hit background range ({blo}, {bhi}) for seed {}",
        spec.seed
    )))
}

// Mixes a base seed and sample index into an independent per-sample seed.
fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `count` scenes with per-index seeds derived from `base_seed`.
/// `workers > 1` renders on that many threads; assembly order (and therefore
/// every output bit) is independent of the worker count.
pub fn generate_dataset<T: Scalar>(
    cfg: &SceneConfig,
    base_seed: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<ParsingSample<T>>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::EmptyInput("generate_dataset"));
    }
    let size = cfg.img_size;
    if workers <= 1 {
        return (0..count)
            .map(|i| {
                generate_scene(
                    &SceneSpec {
                        seed: sample_seed(base_seed, i),
                        scene: cfg.clone(),
                    },
                    size,
                )
            })
            .collect();
    }

    // Workers produce raw buffers; tensors are assembled on this thread in
    // index order.
    let results: Vec<Result<(Vec<T>, Vec<u8>)>> = std::thread::scope(|scope| {
        let chunk = count.div_ceil(workers);
        let mut handles = Vec::new();
        for wk in 0..workers {
            let lo = wk * chunk;
            let hi = ((wk + 1) * chunk).min(count);
            if lo >= hi {
                break;
            }
            let cfg = cfg.clone();
            handles.push((lo, scope.spawn(move || {
                (lo..hi)
                    .map(|i| {
                        let spec = SceneSpec {
                            seed: sample_seed(base_seed, i),
                            scene: cfg.clone(),
                        };
                        let s = generate_scene::<T>(&spec, size)?;
                        Ok((s.image.to_vec(), s.parse_label.ids().to_vec()))
                    })
                    .collect::<Vec<Result<(Vec<T>, Vec<u8>)>>>()
            })));
        }
        let mut out: Vec<Option<Result<(Vec<T>, Vec<u8>)>>> = (0..count).map(|_| None).collect();
        for (lo, handle) in handles {
            for (off, item) in handle.join().expect("worker panicked").into_iter().enumerate() {
                out[lo + off] = Some(item);
            }
        }
        out.into_iter().map(|o| o.expect("all indices filled")).collect()
    });

    let (hsz, wsz) = size;
    results
        .into_iter()
        .map(|r| {
            let (rgb, label) = r?;
            let parse_label = LabelMap::new(hsz, wsz, label)?;
            let seg_label = project_seg_label(&parse_label, cfg.parts_per_hand);
            Ok(ParsingSample {
                image: Tensor::new(&[3, hsz, wsz], rgb)?,
                parse_label,
                seg_label,
            })
        })
        .collect()
}

/// What `augment` did to one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentReport {
    pub brightness: bool,
    pub channel_shift: bool,
    pub contrast: bool,
}

/// The training-time augmentation pipeline: random brightness, random channel
/// shift, and random contrast, applied independently with probabilities 1/3,
/// 1/5, and 1/7. Labels are untouched; the image is re-clipped to [0, 1].
pub fn augment<T: Scalar, R: RngCore>(sample: &ParsingSample<T>, rng: &mut R) -> ParsingSample<T> {
    augment_with_report(sample, rng).0
}

pub fn augment_with_report<T: Scalar, R: RngCore>(
    sample: &ParsingSample<T>,
    rng: &mut R,
) -> (ParsingSample<T>, AugmentReport) {
    // Decide all three applications up front so the decision stream is
    // independent of the magnitudes drawn.
    let apply_brightness = uniform(rng) < 1.0 / 3.0;
    let apply_shift = uniform(rng) < 1.0 / 5.0;
    let apply_contrast = uniform(rng) < 1.0 / 7.0;
    let report = AugmentReport {
        brightness: apply_brightness,
        channel_shift: apply_shift,
        contrast: apply_contrast,
    };
    if !(apply_brightness || apply_shift || apply_contrast) {
        return (sample.clone(), report);
    }

    let mut img = sample.image.to_vec();
    let hw = img.len() / 3;
    if apply_brightness {
        // one common additive constant for all channels
        let delta = -0.2 + 0.4 * uniform(rng);
        for v in img.iter_mut() {
            *v = T::from_f64(v.as_f64() + delta);
        }
    }
    if apply_shift {
        // independent additive constant per channel
        for c in 0..3 {
            let delta = -0.1 + 0.2 * uniform(rng);
            for v in img[c * hw..(c + 1) * hw].iter_mut() {
                *v = T::from_f64(v.as_f64() + delta);
            }
        }
    }
    if apply_contrast {
        // scale about the global image mean
        let factor = 0.8 + 0.45 * uniform(rng);
        let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / img.len() as f64;
        for v in img.iter_mut() {
            *v = T::from_f64(mean + (v.as_f64() - mean) * factor);
        }
    }
    for v in img.iter_mut() {
        *v = T::from_f64(v.as_f64().clamp(0.0, 1.0));
    }
    (
        ParsingSample {
            image: Tensor::new(sample.image.shape(), img).expect("same shape"),
            parse_label: sample.parse_label.clone(),
            seg_label: sample.seg_label.clone(),
        },
        report,
    )
}

// Uniform f64 in [0, 1) drawn from the top 53 bits of one u64.
fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Aggregate class-proportion table over a sample set: (class name, fraction).
pub fn dataset_stats<T: Scalar>(
    samples: &[ParsingSample<T>],
    parts_per_hand: usize,
) -> Result<Vec<(String, f64)>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("dataset_stats"));
    }
    let classes = 2 * parts_per_hand + 1;
    let mut counts = vec![0u64; classes];
    for s in samples {
        for (j, c) in s.parse_label.class_counts(classes)?.iter().enumerate() {
            counts[j] += c;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(counts
        .iter()
        .enumerate()
        .map(|(j, &c)| (class_name(j, parts_per_hand), c as f64 / total as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::class_ratios;

    /// RngCore stub yielding a scripted sequence of uniforms.
    pub struct ScriptRng {
        values: Vec<f64>,
        at: usize,
    }

    impl ScriptRng {
        pub fn new(values: Vec<f64>) -> Self {
            ScriptRng { values, at: 0 }
        }
    }

    impl RngCore for ScriptRng {
        fn next_u32(&mut self) -> u32 {
            (self.next_u64() >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            let v = self.values.get(self.at).copied().unwrap_or(0.999_999_9);
            self.at += 1;
            ((v * (1u64 << 53) as f64) as u64) << 11
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for b in dest.iter_mut() {
                *b = 0;
            }
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    fn default_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            scene: SceneConfig::default(),
        }
    }

    #[test]
    fn both_hands_scene_has_all_seg_classes() {
        let s: ParsingSample<f32> = generate_scene(&default_spec(3), (64, 64)).unwrap();
        let mut seen = [false; 3];
        for &id in s.seg_label.ids() {
            seen[id as usize] = true;
        }
        assert!(seen.iter().all(|&v| v), "missing a seg class: {seen:?}");
    }

    #[test]
    fn generation_is_pure_in_the_spec() {
        let a: ParsingSample<f32> = generate_scene(&default_spec(11), (64, 64)).unwrap();
        let b: ParsingSample<f32> = generate_scene(&default_spec(11), (64, 64)).unwrap();
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.parse_label, b.parse_label);
        let c: ParsingSample<f32> = generate_scene(&default_spec(12), (64, 64)).unwrap();
        assert_ne!(a.image.to_vec(), c.image.to_vec());
    }

    #[test]
    fn seg_projection_invariant_holds() {
        for seed in 0..20 {
            let s: ParsingSample<f32> = generate_scene(&default_spec(seed), (64, 64)).unwrap();
            let projected = project_seg_label(&s.parse_label, 3);
            assert_eq!(s.seg_label, projected);
        }
    }

    #[test]
    fn background_fraction_within_configured_range() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let s: ParsingSample<f32> = generate_scene(
                &SceneSpec {
                    seed,
                    scene: cfg.clone(),
                },
                cfg.img_size,
            )
            .unwrap();
            let bg = s.parse_label.ids().iter().filter(|&&v| v == 0).count() as f64
                / s.parse_label.len() as f64;
            assert!(
                bg >= cfg.bg_range.0 && bg <= cfg.bg_range.1,
                "seed {seed}: bg fraction {bg}"
            );
        }
    }

    #[test]
    fn image_values_stay_in_unit_range() {
        let s: ParsingSample<f32> = generate_scene(&default_spec(5), (64, 64)).unwrap();
        assert!(s.image.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let cfg = SceneConfig::default();
        let a: Vec<ParsingSample<f32>> = generate_dataset(&cfg, 99, 6, 1).unwrap();
        let b: Vec<ParsingSample<f32>> = generate_dataset(&cfg, 99, 6, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.to_vec(), y.image.to_vec());
            assert_eq!(x.parse_label, y.parse_label);
        }
    }

    #[test]
    fn augment_skipping_all_is_identity() {
        let s: ParsingSample<f32> = generate_scene(&default_spec(1), (64, 64)).unwrap();
        // all three uniforms above their probabilities
        let mut rng = ScriptRng::new(vec![0.9, 0.9, 0.9]);
        let (out, report) = augment_with_report(&s, &mut rng);
        assert_eq!(report, AugmentReport::default());
        assert_eq!(out.image.to_vec(), s.image.to_vec());
    }

    #[test]
    fn brightness_shifts_all_channels_by_common_constant() {
        let s: ParsingSample<f64> = generate_scene(&default_spec(2), (64, 64)).unwrap();
        // apply brightness only; magnitude uniform 0.75 -> delta = 0.1
        let mut rng = ScriptRng::new(vec![0.0, 0.9, 0.9, 0.75]);
        let (out, report) = augment_with_report(&s, &mut rng);
        assert!(report.brightness && !report.channel_shift && !report.contrast);
        let before = s.image.to_vec();
        let after = out.image.to_vec();
        for (a, b) in before.iter().zip(&after) {
            // except where clipping bites, the shift is exactly +0.1
            if *a + 0.1 <= 1.0 {
                assert!((b - (a + 0.1)).abs() < 1e-12);
            }
        }
        assert_eq!(out.parse_label, s.parse_label);
    }

    #[test]
    fn augmentation_frequencies_match_probabilities() {
        use rand::SeedableRng;
        let s: ParsingSample<f32> = generate_scene(&default_spec(4), (64, 64)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let trials = 10_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let (_, rep) = augment_with_report(&s, &mut rng);
            counts[0] += rep.brightness as usize;
            counts[1] += rep.channel_shift as usize;
            counts[2] += rep.contrast as usize;
        }
        for (count, p) in counts.iter().zip([1.0 / 3.0, 1.0 / 5.0, 1.0 / 7.0]) {
            let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
            let dev = (*count as f64 - trials as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "count {count}, expected {}", trials as f64 * p);
        }
    }

    #[test]
    fn augment_preserves_labels_and_range() {
        let s: ParsingSample<f32> = generate_scene(&default_spec(6), (64, 64)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let out = augment(&s, &mut rng);
            assert_eq!(out.parse_label, s.parse_label);
            assert_eq!(out.seg_label, s.seg_label);
            assert!(out.image.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn stats_agree_with_single_image_ratios() {
        let s: ParsingSample<f32> = generate_scene(&default_spec(8), (64, 64)).unwrap();
        let stats = dataset_stats(&[s.clone()], 3).unwrap();
        let ratios = class_ratios(&s.parse_label, 7).unwrap();
        for (j, (_, frac)) in stats.iter().enumerate() {
            assert!((frac - ratios.r[j]).abs() < 1e-12);
        }
        let total: f64 = stats.iter().map(|(_, f)| f).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stats_match_brute_force_count() {
        let samples: Vec<ParsingSample<f32>> =
            generate_dataset(&SceneConfig::default(), 21, 5, 1).unwrap();
        let stats = dataset_stats(&samples, 3).unwrap();
        let mut counts = vec![0u64; 7];
        let mut total = 0u64;
        for s in &samples {
            for &id in s.parse_label.ids() {
                counts[id as usize] += 1;
                total += 1;
            }
        }
        for (j, (_, frac)) in stats.iter().enumerate() {
            assert!((frac - counts[j] as f64 / total as f64).abs() < 1e-12);
        }
    }
}
