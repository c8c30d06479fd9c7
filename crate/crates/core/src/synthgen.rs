//! Procedural fundus-like images with pixel-exact ground truth.
//!
//! A sample is a circular fundus field on black, with a bright optic disc,
//! dark vessels radiating from the disc, and up to four lesion types drawn
//! according to a per-grade count budget. Every lesion pixel that is painted
//! is recorded in that lesion type's mask, so localization can be scored
//! exactly.
//!
//! Output is a pure function of `(config, grade, index)`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::seeds;
use crate::{LESION_NAMES, NUM_GRADES, NUM_LESIONS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grade {0} is outside 0..=4")]
    InvalidGrade(usize),
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("dataset i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed labels.csv line {line}: {reason}")]
    Labels { line: usize, reason: String },
}

/// Inclusive count range for one lesion type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    pub const NONE: CountRange = CountRange::new(0, 0);
}

/// Lesion count ranges indexed `[grade][lesion]`, lesions in (MA, HE, SE, EX) order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionBudget(pub [[CountRange; NUM_LESIONS]; NUM_GRADES]);

impl Default for LesionBudget {
    fn default() -> Self {
        use CountRange as R;
        Self([
            [R::NONE, R::NONE, R::NONE, R::NONE],
            [R::new(1, 3), R::NONE, R::NONE, R::NONE],
            [R::new(2, 4), R::new(1, 2), R::NONE, R::new(1, 2)],
            [R::new(3, 6), R::new(2, 4), R::new(1, 2), R::new(2, 4)],
            [R::new(5, 8), R::new(4, 6), R::new(2, 3), R::new(4, 6)],
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Pixels per side.
    pub image_size: u32,
    pub seed: u64,
    pub lesion_budget: LesionBudget,
    pub vessel_count: u32,
    /// Optic disc radius in pixels.
    pub disc_radius: f64,
    /// Vessel stroke width in pixels.
    pub vessel_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            seed: 0,
            lesion_budget: LesionBudget::default(),
            vessel_count: 5,
            disc_radius: 5.0,
            vessel_width: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_size < 64 {
            return Err(SynthError::InvalidConfig(format!(
                "image_size {} < 64",
                self.image_size
            )));
        }
        if !(self.disc_radius > 0.0) || self.disc_radius > self.image_size as f64 / 6.0 {
            return Err(SynthError::InvalidConfig(format!(
                "disc_radius {} outside (0, image_size/6]",
                self.disc_radius
            )));
        }
        if !(self.vessel_width >= 1.0) {
            return Err(SynthError::InvalidConfig("vessel_width < 1".into()));
        }
        for (g, row) in self.lesion_budget.0.iter().enumerate() {
            for (k, r) in row.iter().enumerate() {
                if r.min > r.max {
                    return Err(SynthError::InvalidConfig(format!(
                        "grade {g} {}: min {} > max {}",
                        LESION_NAMES[k], r.min, r.max
                    )));
                }
            }
        }
        if self.lesion_budget.0[0].iter().any(|r| r.max > 0) {
            return Err(SynthError::InvalidConfig(
                "grade 0 must not carry lesions".into(),
            ));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.image_size as f64 / 64.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub image: RgbImage,
    pub grade: usize,
    /// (MA, HE, SE, EX) presence.
    pub lesion_flags: [bool; NUM_LESIONS],
    pub lesion_masks: [BinaryMask; NUM_LESIONS],
    pub vessel_mask: BinaryMask,
}

impl FundusSample {
    pub fn lesion_union(&self) -> BinaryMask {
        let mut u = self.lesion_masks[0].clone();
        for m in &self.lesion_masks[1..] {
            u.union_in_place(m);
        }
        u
    }

    pub fn lesion_pixel_count(&self) -> usize {
        self.lesion_masks.iter().map(BinaryMask::pixel_count).sum()
    }
}

/// Geometry shared by the drawing routines.
struct Field {
    size: u32,
    cx: f64,
    cy: f64,
    radius: f64,
    disc: (f64, f64),
    disc_radius: f64,
}

impl Field {
    fn inside(&self, x: f64, y: f64) -> bool {
        (x - self.cx).hypot(y - self.cy) < self.radius
    }

    fn in_disc(&self, x: f64, y: f64, margin: f64) -> bool {
        (x - self.disc.0).hypot(y - self.disc.1) <= self.disc_radius + margin
    }

    fn region(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |x, y| {
            self.inside(x as f64 + 0.5, y as f64 + 0.5)
        })
    }
}

struct Canvas {
    size: u32,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        self.px[(y * self.size + x) as usize] = c;
    }

    fn blend(&mut self, x: u32, y: u32, c: [f64; 3], a: f64) {
        let p = &mut self.px[(y * self.size + x) as usize];
        for ch in 0..3 {
            p[ch] = (1.0 - a) * p[ch] + a * c[ch];
        }
    }

    fn into_image(self) -> RgbImage {
        let size = self.size;
        let mut img = RgbImage::new(size, size);
        for (i, c) in self.px.into_iter().enumerate() {
            let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            img.put_pixel(
                i as u32 % size,
                i as u32 / size,
                Rgb([q(c[0]), q(c[1]), q(c[2])]),
            );
        }
        img
    }
}

/// Pixels whose centers fall within `r` of `(x, y)`, clipped to the image.
fn disk_pixels(size: u32, x: f64, y: f64, r: f64) -> impl Iterator<Item = (u32, u32, f64)> {
    let x0 = (x - r - 1.0).floor().max(0.0) as u32;
    let y0 = (y - r - 1.0).floor().max(0.0) as u32;
    let x1 = ((x + r + 1.0).ceil() as u32).min(size - 1);
    let y1 = ((y + r + 1.0).ceil() as u32).min(size - 1);
    (y0..=y1).flat_map(move |py| {
        (x0..=x1).filter_map(move |px| {
            let d = (px as f64 + 0.5 - x).hypot(py as f64 + 0.5 - y);
            (d <= r).then_some((px, py, d))
        })
    })
}

const BG: [f64; 3] = [196.0, 92.0, 48.0];
const DISC: [f64; 3] = [246.0, 214.0, 150.0];
const VESSEL: [f64; 3] = [150.0, 58.0, 36.0];
/// Per-stroke multiplier range applied to `VESSEL`.
const VESSEL_TONE: (f64, f64) = (0.7, 1.0);
const MA_COLOR: [f64; 3] = [60.0, 6.0, 8.0];
const HE_COLOR: [f64; 3] = [50.0, 4.0, 6.0];
const SE_COLOR: [f64; 3] = [238.0, 226.0, 206.0];
const EX_COLOR: [f64; 3] = [252.0, 238.0, 80.0];

fn sample_rng(config: &SynthConfig, grade: usize, index: u64) -> rand_chacha::ChaCha8Rng {
    seeds::rng_from(seeds::derive_indexed(
        config.seed,
        "synth.sample",
        &[grade as u64, index],
    ))
}

/// Field geometry; consumes the first draws of the sample RNG.
fn draw_field(config: &SynthConfig, rng: &mut impl Rng) -> Field {
    let s = config.image_size as f64;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Field {
        size: config.image_size,
        cx: s / 2.0,
        cy: s / 2.0,
        radius: FIELD_RADIUS * s,
        disc: (
            s / 2.0 + side * 0.27 * s,
            s / 2.0 + rng.random_range(-0.05..0.05) * s,
        ),
        disc_radius: config.disc_radius,
    }
}

/// Optic disc `(x, y, radius)` of the sample `(grade, index)`.
pub fn optic_disc(config: &SynthConfig, grade: usize, index: u64) -> (f64, f64, f64) {
    let f = draw_field(config, &mut sample_rng(config, grade, index));
    (f.disc.0, f.disc.1, f.disc_radius)
}

/// Fundus field radius as a fraction of the image side.
pub const FIELD_RADIUS: f64 = 0.46;

/// Render one sample. `index` distinguishes samples of the same grade.
pub fn generate_sample(
    config: &SynthConfig,
    grade: usize,
    index: u64,
) -> Result<FundusSample, SynthError> {
    if grade >= NUM_GRADES {
        return Err(SynthError::InvalidGrade(grade));
    }
    config.validate()?;
    let mut rng = sample_rng(config, grade, index);
    let size = config.image_size;
    let scale = config.scale();
    let field = draw_field(config, &mut rng);
    let region = field.region();

    let mut canvas = Canvas {
        size,
        px: vec![[0.0; 3]; (size * size) as usize],
    };
    paint_background(&mut canvas, &field, &region, &mut rng);
    paint_disc(&mut canvas, &field);
    let vessel_mask = paint_vessels(&mut canvas, &field, &region, config, &mut rng);

    let mut lesion_masks: [BinaryMask; NUM_LESIONS] =
        std::array::from_fn(|_| BinaryMask::empty(size, size));
    let budget = &config.lesion_budget.0[grade];
    let counts: [u32; NUM_LESIONS] =
        std::array::from_fn(|k| rng.random_range(budget[k].min..=budget[k].max));
    // Paint order: soft exudates underneath, then hemorrhages, exudates, microaneurysms.
    for &k in &[2usize, 1, 3, 0] {
        for _ in 0..counts[k] {
            paint_lesion(
                k,
                &mut canvas,
                &field,
                &region,
                scale,
                &mut lesion_masks[k],
                &mut rng,
            );
        }
    }

    let noise = Normal::new(0.0, 1.5).expect("valid std");
    for y in 0..size {
        for x in 0..size {
            if region.get(x, y) {
                let p = &mut canvas.px[(y * size + x) as usize];
                for ch in p.iter_mut() {
                    *ch += noise.sample(&mut rng);
                }
            }
        }
    }

    let lesion_flags = std::array::from_fn(|k| !lesion_masks[k].is_empty());
    Ok(FundusSample {
        id: format!("g{grade}_{index:04}"),
        image: canvas.into_image(),
        grade,
        lesion_flags,
        lesion_masks,
        vessel_mask,
    })
}

fn paint_background(canvas: &mut Canvas, field: &Field, region: &BinaryMask, rng: &mut impl Rng) {
    // Low-frequency texture: a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..3.0) * 2.0 * PI / field.size as f64;
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(2.0..6.0),
            )
        })
        .collect();
    let tint: f64 = rng.random_range(-8.0..8.0);
    for y in 0..field.size {
        for x in 0..field.size {
            if !region.get(x, y) {
                continue;
            }
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rr = (fx - field.cx).hypot(fy - field.cy) / field.radius;
            let vignette = 1.0 - 0.35 * rr * rr;
            let tex: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * fx + ky * fy + ph).sin())
                .sum();
            let c = [
                (BG[0] + tint) * vignette + tex,
                (BG[1] + tint * 0.5) * vignette + 0.5 * tex,
                BG[2] * vignette + 0.3 * tex,
            ];
            canvas.set(x, y, c);
        }
    }
}

fn paint_disc(canvas: &mut Canvas, field: &Field) {
    let (dx, dy) = field.disc;
    for (x, y, d) in disk_pixels(field.size, dx, dy, field.disc_radius + 1.0) {
        if !field.inside(x as f64 + 0.5, y as f64 + 0.5) {
            continue;
        }
        let a = if d <= field.disc_radius {
            1.0
        } else {
            1.0 - (d - field.disc_radius)
        };
        canvas.blend(x, y, DISC, a.clamp(0.0, 1.0));
    }
}

fn paint_vessels(
    canvas: &mut Canvas,
    field: &Field,
    region: &BinaryMask,
    config: &SynthConfig,
    rng: &mut impl Rng,
) -> BinaryMask {
    let size = field.size;
    let mut mask = BinaryMask::empty(size, size);
    let n = config.vessel_count.max(1) as f64;
    let base = rng.random_range(0.0..2.0 * PI);
    let half_width = config.vessel_width / 2.0;
    // Each stroke gets its own shade; later strokes paint over earlier ones.
    let mut tone = vec![1.0; (size * size) as usize];
    for k in 0..config.vessel_count {
        let shade = rng.random_range(VESSEL_TONE.0..VESSEL_TONE.1);
        let mut theta = base + 2.0 * PI * k as f64 / n + rng.random_range(-0.3..0.3);
        let mut curvature = rng.random_range(-0.04..0.04);
        let (mut x, mut y) = field.disc;
        let max_len = 2.0 * field.radius;
        let mut len = 0.0;
        while len < max_len && field.inside(x, y) {
            for (px, py, _) in disk_pixels(size, x, y, half_width) {
                if region.get(px, py) {
                    mask.set(px, py, true);
                    tone[(py * size + px) as usize] = shade;
                }
            }
            x += theta.cos() * 0.5;
            y += theta.sin() * 0.5;
            len += 0.5;
            theta += curvature;
            curvature = (curvature + rng.random_range(-0.004..0.004)).clamp(-0.05, 0.05);
        }
    }
    for y in 0..size {
        for x in 0..size {
            if mask.get(x, y) {
                let t = tone[(y * size + x) as usize];
                canvas.set(x, y, VESSEL.map(|c| c * t));
            }
        }
    }
    mask
}

/// Place a lesion center inside the field, away from the rim and the disc.
fn place(field: &Field, extent: f64, rng: &mut impl Rng) -> Option<(f64, f64)> {
    for _ in 0..1000 {
        let r = field.radius - extent - 1.0;
        let (x, y) = (
            field.cx + rng.random_range(-r..r),
            field.cy + rng.random_range(-r..r),
        );
        if (x - field.cx).hypot(y - field.cy) < r && !field.in_disc(x, y, extent + 1.5) {
            return Some((x, y));
        }
    }
    None
}

fn paint_lesion(
    kind: usize,
    canvas: &mut Canvas,
    field: &Field,
    region: &BinaryMask,
    scale: f64,
    mask: &mut BinaryMask,
    rng: &mut impl Rng,
) {
    let size = field.size;
    // (center offset, radius) blobs composing the lesion, plus extent for placement.
    let (blobs, extent): (Vec<(f64, f64, f64)>, f64) = match kind {
        // MA: single dark-red dot
        0 => (
            vec![(0.0, 0.0, rng.random_range(1.5..2.5) * scale)],
            2.5 * scale,
        ),
        // HE: irregular union of a few dark disks
        1 => {
            let n = rng.random_range(2..=3);
            let b = (0..n)
                .map(|_| {
                    (
                        rng.random_range(-1.5..1.5) * scale,
                        rng.random_range(-1.5..1.5) * scale,
                        rng.random_range(1.4..2.1) * scale,
                    )
                })
                .collect();
            (b, 4.0 * scale)
        }
        // SE: one soft pale patch
        2 => (
            vec![(0.0, 0.0, rng.random_range(2.5..3.4) * scale)],
            3.5 * scale,
        ),
        // EX: cluster of small bright dots
        _ => {
            let n = rng.random_range(3..=5);
            let b = (0..n)
                .map(|_| {
                    (
                        rng.random_range(-2.0..2.0) * scale,
                        rng.random_range(-2.0..2.0) * scale,
                        rng.random_range(0.8..1.2) * scale,
                    )
                })
                .collect();
            (b, 3.5 * scale)
        }
    };
    let Some((cx, cy)) = place(field, extent, rng) else {
        log::warn!("could not place {} lesion", LESION_NAMES[kind]);
        return;
    };
    for (ox, oy, r) in blobs {
        for (x, y, d) in disk_pixels(size, cx + ox, cy + oy, r) {
            if !region.get(x, y) || field.in_disc(x as f64 + 0.5, y as f64 + 0.5, 0.0) {
                continue;
            }
            match kind {
                0 => canvas.set(x, y, MA_COLOR),
                1 => canvas.set(x, y, HE_COLOR),
                2 => {
                    let t = d / r;
                    canvas.blend(x, y, SE_COLOR, 0.9 * (1.0 - t * t).max(0.15));
                }
                _ => canvas.set(x, y, EX_COLOR),
            }
            mask.set(x, y, true);
        }
    }
}

/// Samples for each grade in order, `counts[g]` of grade `g`.
pub fn generate_dataset(
    config: &SynthConfig,
    counts: &[usize; NUM_GRADES],
) -> Result<Vec<FundusSample>, SynthError> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (grade, &n) in counts.iter().enumerate() {
        for index in 0..n as u64 {
            out.push(generate_sample(config, grade, index)?);
        }
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<(), SynthError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| SynthError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Write `img_{id}.png`, `mask_{id}_{MA|HE|SE|EX}.png`, `vessel_{id}.png`
/// and `labels.csv` into `dir`.
pub fn write_dataset(samples: &[FundusSample], dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let labels_path = dir.join("labels.csv");
    let mut csv = String::from("id,grade,ma,he,se,ex\n");
    for s in samples {
        save_png(&s.image, &dir.join(format!("img_{}.png", s.id)))?;
        for (k, name) in LESION_NAMES.iter().enumerate() {
            save_png(
                &s.lesion_masks[k].to_gray(),
                &dir.join(format!("mask_{}_{name}.png", s.id)),
            )?;
        }
        save_png(
            &s.vessel_mask.to_gray(),
            &dir.join(format!("vessel_{}.png", s.id)),
        )?;
        let f = s.lesion_flags.map(u8::from);
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id, s.grade, f[0], f[1], f[2], f[3]
        ));
    }
    let mut file = fs::File::create(&labels_path).map_err(io_err(&labels_path))?;
    file.write_all(csv.as_bytes())
        .map_err(io_err(&labels_path))?;
    Ok(())
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub grade: usize,
    pub flags: [bool; NUM_LESIONS],
}

pub fn read_labels(dir: &Path) -> Result<Vec<LabelRow>, SynthError> {
    let path = dir.join("labels.csv");
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 6 {
            return Err(SynthError::Labels {
                line: i + 1,
                reason: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let num = |s: &str| -> Result<usize, SynthError> {
            s.parse().map_err(|_| SynthError::Labels {
                line: i + 1,
                reason: format!("not an integer: {s:?}"),
            })
        };
        let grade = num(cols[1])?;
        if grade >= NUM_GRADES {
            return Err(SynthError::InvalidGrade(grade));
        }
        let mut flags = [false; NUM_LESIONS];
        for k in 0..NUM_LESIONS {
            flags[k] = num(cols[2 + k])? != 0;
        }
        rows.push(LabelRow {
            id: cols[0].to_string(),
            grade,
            flags,
        });
    }
    Ok(rows)
}

fn load_gray(path: &Path) -> Result<GrayImage, SynthError> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|source| SynthError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Read a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<FundusSample>, SynthError> {
    read_labels(dir)?
        .into_iter()
        .map(|row| {
            let img_path = dir.join(format!("img_{}.png", row.id));
            let image = image::open(&img_path)
                .map_err(|source| SynthError::Image {
                    path: img_path.display().to_string(),
                    source,
                })?
                .to_rgb8();
            let mut masks = Vec::with_capacity(NUM_LESIONS);
            for name in LESION_NAMES {
                let g = load_gray(&dir.join(format!("mask_{}_{name}.png", row.id)))?;
                masks.push(BinaryMask::from_gray(&g));
            }
            let vessel =
                BinaryMask::from_gray(&load_gray(&dir.join(format!("vessel_{}.png", row.id)))?);
            Ok(FundusSample {
                id: row.id,
                image,
                grade: row.grade,
                lesion_flags: row.flags,
                lesion_masks: masks.try_into().expect("four masks"),
                vessel_mask: vessel,
            })
        })
        .collect()
}
