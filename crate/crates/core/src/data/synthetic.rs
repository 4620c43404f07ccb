//! Procedural multi-class texture dataset with localized defects.
//!
//! Every class is a texture family (stripes, checkerboard or dot lattice)
//! with its own frequency, orientation and palette. Anomalous test images
//! carry one localized defect:
//!
//! * `patch_swap`: a disc filled with another class's texture,
//! * `scratch`: a thin line of contrasting color,
//! * `blotch`: a soft color stain.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub defect_fraction: f64,
    pub seed: u64,
    /// Side length of the written images in pixels.
    pub size: usize,
}

impl SyntheticSpec {
    pub fn new(
        class_count: usize,
        train_per_class: usize,
        test_per_class: usize,
        defect_fraction: f64,
        seed: u64,
    ) -> Self {
        Self {
            class_count,
            train_per_class,
            test_per_class,
            defect_fraction,
            seed,
            size: 64,
        }
    }

    /// Number of anomalous test images per class (rounded up).
    pub fn anomalous_per_class(&self) -> usize {
        (self.defect_fraction * self.test_per_class as f64).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("synthetic datasets need at least 2 classes"));
        }
        if !(self.defect_fraction > 0.0 && self.defect_fraction < 1.0) {
            return Err(Error::invalid("defect fraction must lie in (0, 1)"));
        }
        if self.train_per_class == 0 {
            return Err(Error::invalid("train_per_class must be positive"));
        }
        if self.size < 8 {
            return Err(Error::invalid("synthetic images must be at least 8 pixels wide"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    PatchSwap,
    Scratch,
    Blotch,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::PatchSwap => "patch_swap",
            DefectKind::Scratch => "scratch",
            DefectKind::Blotch => "blotch",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Family {
    Stripes,
    Checker,
    Dots,
}

#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    family: Family,
    /// Cycles per image side.
    frequency: f32,
    angle: f32,
    fg: [f32; 3],
    bg: [f32; 3],
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_style(class: usize) -> ClassStyle {
    let family = match class % 3 {
        0 => Family::Stripes,
        1 => Family::Checker,
        _ => Family::Dots,
    };
    let round = (class / 3) as f32;
    let hue = (class as f32 * 0.618_034).fract();
    ClassStyle {
        family,
        frequency: [5.0, 3.0, 4.0][class % 3] + round,
        angle: [0.35, 0.0, 0.2][class % 3] + 0.4 * round,
        fg: hsv(hue, 0.65, 0.85),
        bg: hsv(hue + 0.5, 0.35, 0.3),
    }
}

/// Per-image nuisance parameters.
#[derive(Clone, Copy, Debug)]
struct Variation {
    phase_x: f32,
    phase_y: f32,
    freq_scale: f32,
    angle_offset: f32,
    gain: f32,
}

impl Variation {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            phase_x: rng.random_range(0.0..2.0 * PI),
            phase_y: rng.random_range(0.0..2.0 * PI),
            freq_scale: rng.random_range(0.92..1.08),
            angle_offset: rng.random_range(-0.08..0.08),
            gain: rng.random_range(0.93..1.07),
        }
    }
}

fn texture_value(style: &ClassStyle, var: &Variation, y: f32, x: f32, size: f32) -> f32 {
    let freq = style.frequency * var.freq_scale;
    let angle = style.angle + var.angle_offset;
    let (s, c) = angle.sin_cos();
    let u = (x * c + y * s) / size;
    let v = (-x * s + y * c) / size;
    match style.family {
        Family::Stripes => 0.5 + 0.5 * (2.0 * PI * freq * u + var.phase_x).sin(),
        Family::Checker => {
            let prod =
                (2.0 * PI * freq * u + var.phase_x).sin() * (2.0 * PI * freq * v + var.phase_y).sin();
            0.5 + 0.5 * (4.0 * prod).tanh()
        }
        Family::Dots => {
            let gu = freq * u + var.phase_x / (2.0 * PI);
            let gv = freq * v + var.phase_y / (2.0 * PI);
            let du = gu - gu.round();
            let dv = gv - gv.round();
            (-(du * du + dv * dv) / (2.0 * 0.12 * 0.12)).exp()
        }
    }
}

fn texture_pixel(style: &ClassStyle, var: &Variation, y: usize, x: usize, size: usize) -> [f32; 3] {
    let t = texture_value(style, var, y as f32, x as f32, size as f32);
    std::array::from_fn(|ch| ((style.bg[ch] * (1.0 - t) + style.fg[ch] * t) * var.gain).clamp(0.0, 1.0))
}

fn render(style: &ClassStyle, rng: &mut ChaCha8Rng, size: usize) -> Image {
    let var = Variation::draw(rng);
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let mut px = texture_pixel(style, &var, y, x, size);
            for v in &mut px {
                *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

fn apply_defect(
    img: &mut Image,
    kind: DefectKind,
    class: usize,
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Mask {
    let size = img.height();
    let sz = size as f32;
    let mut mask = Mask::zeros(size, size);
    let margin = sz * 0.2;
    let cy = rng.random_range(margin..sz - margin);
    let cx = rng.random_range(margin..sz - margin);
    match kind {
        DefectKind::PatchSwap => {
            let offset = rng.random_range(1..class_count);
            let other = class_style((class + offset) % class_count);
            let var = Variation::draw(rng);
            let radius = rng.random_range(sz * 0.1..sz * 0.16);
            for y in 0..size {
                for x in 0..size {
                    let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    if d <= radius {
                        img.set_pixel(y, x, texture_pixel(&other, &var, y, x, size));
                        mask.set(y, x, true);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let angle = rng.random_range(0.0..PI);
            let half_len = rng.random_range(sz * 0.12..sz * 0.22);
            let half_width = (sz * 0.025).max(1.0);
            let (s, c) = angle.sin_cos();
            let bright = rng.random_bool(0.5);
            let color = if bright { [0.97, 0.97, 0.9] } else { [0.04, 0.04, 0.06] };
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f32 - cy;
                    let dx = x as f32 - cx;
                    let along = dx * c + dy * s;
                    let across = -dx * s + dy * c;
                    if along.abs() <= half_len && across.abs() <= half_width {
                        img.set_pixel(y, x, color);
                        mask.set(y, x, true);
                    }
                }
            }
        }
        DefectKind::Blotch => {
            let ry = rng.random_range(sz * 0.08..sz * 0.14);
            let rx = rng.random_range(sz * 0.08..sz * 0.14);
            let tint = hsv(rng.random_range(0.0..1.0), 0.9, 0.9);
            for y in 0..size {
                for x in 0..size {
                    let r = ((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2);
                    if r <= 1.0 {
                        let w = 0.85 * (1.0 - 0.5 * r);
                        let px = img.pixel(y, x);
                        let mut out = [0.0; 3];
                        for ch in 0..3 {
                            out[ch] = (px[ch] * (1.0 - w) + tint[ch] * w).clamp(0.0, 1.0);
                        }
                        img.set_pixel(y, x, out);
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    mask
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub class_names: Vec<String>,
    pub train_images: usize,
    pub test_images: usize,
    pub anomalous_images: usize,
    pub files: Vec<PathBuf>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes an MVTec-style tree under `out_root`, deterministic in `spec.seed`.
pub fn generate_synthetic_dataset(out_root: &Path, spec: &SyntheticSpec) -> Result<SyntheticSummary> {
    spec.validate()?;
    ensure_dir(out_root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anomalous = spec.anomalous_per_class().min(spec.test_per_class);
    let kinds = [DefectKind::PatchSwap, DefectKind::Scratch, DefectKind::Blotch];

    let mut summary = SyntheticSummary {
        class_names: Vec::new(),
        train_images: 0,
        test_images: 0,
        anomalous_images: 0,
        files: Vec::new(),
    };
    for class in 0..spec.class_count {
        let name = format!("class_{class:02}");
        let style = class_style(class);
        let class_dir = out_root.join(&name);

        let train_dir = class_dir.join("train").join("good");
        ensure_dir(&train_dir)?;
        for i in 0..spec.train_per_class {
            let path = train_dir.join(format!("{i:03}.png"));
            render(&style, &mut rng, spec.size).save_png(&path)?;
            summary.files.push(path);
            summary.train_images += 1;
        }

        ensure_dir(&class_dir.join("test"))?;
        for i in 0..spec.test_per_class {
            let mut img = render(&style, &mut rng, spec.size);
            if i < anomalous {
                let kind = kinds[rng.random_range(0..kinds.len())];
                let mask = apply_defect(&mut img, kind, class, spec.class_count, &mut rng);
                let dir = class_dir.join("test").join(kind.dir_name());
                let gt_dir = class_dir.join("ground_truth").join(kind.dir_name());
                ensure_dir(&dir)?;
                ensure_dir(&gt_dir)?;
                let path = dir.join(format!("{i:03}.png"));
                let mask_path = gt_dir.join(format!("{i:03}_mask.png"));
                img.save_png(&path)?;
                mask.save_png(&mask_path)?;
                summary.files.push(path);
                summary.files.push(mask_path);
                summary.anomalous_images += 1;
            } else {
                let dir = class_dir.join("test").join("good");
                ensure_dir(&dir)?;
                let path = dir.join(format!("{i:03}.png"));
                img.save_png(&path)?;
                summary.files.push(path);
            }
            summary.test_images += 1;
        }
        summary.class_names.push(name);
    }
    Ok(summary)
}
