//! Vessel-aware repair of inpainted regions.
//!
//! Inpainting a lesion that sits on a vessel also erases the vessel. Repair
//! paints a synthetic vessel colour back over the vessel mask, blended more
//! strongly where the vessel crosses the inpainted region.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::seeds;

/// Raw vessel maps are thresholded strictly above this value.
pub const VESSEL_THRESHOLD: u8 = 20;
/// Components whose larger bounding-box side is shorter than this are dropped.
pub const MIN_SEGMENT_LENGTH: u32 = 20;

#[derive(Debug, Error)]
pub enum VesselError {
    #[error("vessel mask is empty")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid colour params: {0}")]
    InvalidParams(String),
    #[error("vessel map {path}: {reason}")]
    Source { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub beta_dark: f64,
    pub gamma_distance: f64,
    pub delta_noise: f64,
    pub alpha_vessel: f64,
    pub alpha_inter: f64,
}

impl Default for ColorParams {
    fn default() -> Self {
        Self {
            beta_dark: 0.7,
            gamma_distance: 0.5,
            delta_noise: 0.1,
            alpha_vessel: 0.35,
            alpha_inter: 0.8,
        }
    }
}

impl ColorParams {
    pub fn validate(&self) -> Result<(), VesselError> {
        let mut errs = Vec::new();
        if !(self.beta_dark > 0.0 && self.beta_dark <= 1.0) {
            errs.push(format!("beta_dark {} not in (0, 1]", self.beta_dark));
        }
        if !(0.0..=1.0).contains(&self.gamma_distance) {
            errs.push(format!(
                "gamma_distance {} not in [0, 1]",
                self.gamma_distance
            ));
        }
        if !(self.delta_noise >= 0.0 && self.delta_noise.is_finite()) {
            errs.push(format!("delta_noise {} must be >= 0", self.delta_noise));
        }
        for (name, v) in [
            ("alpha_vessel", self.alpha_vessel),
            ("alpha_inter", self.alpha_inter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} {v} not in [0, 1]"));
            }
        }
        if self.alpha_inter < self.alpha_vessel {
            errs.push(format!(
                "alpha_inter {} < alpha_vessel {}",
                self.alpha_inter, self.alpha_vessel
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(VesselError::InvalidParams(errs.join("; ")))
        }
    }
}

/// Threshold, open, close, then drop short components.
pub fn preprocess_vessel_mask(raw: &GrayImage) -> BinaryMask {
    let bin = BinaryMask::from_fn(raw.width(), raw.height(), |x, y| {
        raw.get_pixel(x, y)[0] > VESSEL_THRESHOLD
    });
    let cleaned = bin.open_cross().close_cross();
    let mut out = BinaryMask::empty(raw.width(), raw.height());
    for comp in cleaned.components() {
        if segment_length(&comp) >= MIN_SEGMENT_LENGTH {
            for (x, y) in comp {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Larger side of the component's bounding box, in pixels.
pub fn segment_length(pixels: &[(u32, u32)]) -> u32 {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for &(x, y) in pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if pixels.is_empty() {
        0
    } else {
        (x1 - x0 + 1).max(y1 - y0 + 1)
    }
}

pub fn intersect(lesion_mask: &BinaryMask, vessel_mask: &BinaryMask) -> BinaryMask {
    lesion_mask.and(vessel_mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselColorStats {
    pub mean: [f64; 3],
    /// Population standard deviation.
    pub std: [f64; 3],
}

pub fn extract_vessel_color_stats(
    original: &RgbImage,
    vessel_mask: &BinaryMask,
) -> Result<VesselColorStats, VesselError> {
    if original.dimensions() != vessel_mask.dims() {
        return Err(VesselError::Shape(format!(
            "image {:?} vs mask {:?}",
            original.dimensions(),
            vessel_mask.dims()
        )));
    }
    let px: Vec<[f64; 3]> = original
        .enumerate_pixels()
        .filter(|(x, y, _)| vessel_mask.get(*x, *y))
        .map(|(_, _, p)| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if px.is_empty() {
        return Err(VesselError::EmptyMask);
    }
    let n = px.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = px.iter().map(|p| p[c]).sum::<f64>() / n;
        std[c] = (px.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(VesselColorStats { mean, std })
}

/// Floating-point RGB buffer, row-major. Zero outside the vessel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredVessels {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl ColoredVessels {
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }
}

/// Distance-weighted vessel colour: darker base colour, attenuated away from
/// the mask centroid, with per-pixel Gaussian jitter scaled by the vessel std.
///
/// Noise is drawn three values per vessel pixel in row-major order; with
/// `delta_noise == 0` the RNG is never touched.
pub fn generate_colored_vessels(
    vessel_mask: &BinaryMask,
    stats: &VesselColorStats,
    params: &ColorParams,
    seed: u64,
) -> Result<ColoredVessels, VesselError> {
    params.validate()?;
    let (w, h) = vessel_mask.dims();
    let coords: Vec<(u32, u32)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| vessel_mask.get(x, y))
        .collect();
    if coords.is_empty() {
        return Err(VesselError::EmptyMask);
    }
    let n = coords.len() as f64;
    let cx = coords.iter().map(|c| c.0 as f64).sum::<f64>() / n;
    let cy = coords.iter().map(|c| c.1 as f64).sum::<f64>() / n;
    let dist = |x: u32, y: u32| (x as f64 - cx).hypot(y as f64 - cy);
    let r_max = coords.iter().map(|&(x, y)| dist(x, y)).fold(0.0, f64::max);
    let base = stats.mean.map(|m| params.beta_dark * m);

    let mut rng = seeds::rng_from(seed);
    let normal = (params.delta_noise > 0.0)
        .then(|| Normal::new(0.0, params.delta_noise).expect("finite std"));
    let mut data = vec![[0.0; 3]; (w * h) as usize];
    for &(x, y) in &coords {
        let alpha = if r_max > 0.0 {
            1.0 - params.gamma_distance * dist(x, y) / r_max
        } else {
            1.0
        };
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let eps = normal.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            c[ch] = (alpha * (base[ch] + stats.std[ch] * eps)).clamp(0.0, 255.0);
        }
        data[(y * w + x) as usize] = c;
    }
    Ok(ColoredVessels {
        width: w,
        height: h,
        data,
    })
}

/// Mix colored vessels into the inpainted image: `alpha_inter` on
/// intersection pixels, `alpha_vessel` on the remaining vessel pixels.
pub fn blend_vessels(
    inpainted: &RgbImage,
    colored: &ColoredVessels,
    vessel_mask: &BinaryMask,
    intersection: &BinaryMask,
    params: &ColorParams,
) -> Result<RgbImage, VesselError> {
    let dims = inpainted.dimensions();
    if dims != vessel_mask.dims()
        || dims != intersection.dims()
        || dims != (colored.width, colored.height)
    {
        return Err(VesselError::Shape("blend inputs disagree in size".into()));
    }
    let mut out = inpainted.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let a = if intersection.get(x, y) {
            params.alpha_inter
        } else if vessel_mask.get(x, y) {
            params.alpha_vessel
        } else {
            continue;
        };
        let c = colored.get(x, y);
        for ch in 0..3 {
            let v = (1.0 - a) * p[ch] as f64 + a * c[ch];
            p[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepairOutcome {
    pub image: RgbImage,
    /// Set when the preprocessed vessel mask was empty.
    pub skipped: bool,
}

/// Full repair: preprocess, intersect, colour stats from `original`, colour, blend.
pub fn repair(
    inpainted: &RgbImage,
    original: &RgbImage,
    raw_vessels: &GrayImage,
    lesion_mask: &BinaryMask,
    params: &ColorParams,
    seed: u64,
) -> Result<RepairOutcome, VesselError> {
    if inpainted.dimensions() != original.dimensions()
        || inpainted.dimensions() != raw_vessels.dimensions()
        || inpainted.dimensions() != lesion_mask.dims()
    {
        return Err(VesselError::Shape("repair inputs disagree in size".into()));
    }
    let vessels = preprocess_vessel_mask(raw_vessels);
    if vessels.is_empty() {
        return Ok(RepairOutcome {
            image: inpainted.clone(),
            skipped: true,
        });
    }
    let inter = intersect(lesion_mask, &vessels);
    let stats = extract_vessel_color_stats(original, &vessels)?;
    let colored = generate_colored_vessels(&vessels, &stats, params, seed)?;
    let image = blend_vessels(inpainted, &colored, &vessels, &inter, params)?;
    Ok(RepairOutcome {
        image,
        skipped: false,
    })
}

/// Darkness ridge response on the green channel: how much darker a pixel is
/// than its 7×7 neighbourhood mean, scaled by 4. Pixels that are pure black
/// (outside the fundus field) respond zero.
pub fn ridge_filter(image: &RgbImage) -> GrayImage {
    let (w, h) = image.dimensions();
    let g = |x: u32, y: u32| image.get_pixel(x, y)[1] as f64;
    GrayImage::from_fn(w, h, |x, y| {
        let p = image.get_pixel(x, y);
        if p[0] == 0 && p[1] == 0 && p[2] == 0 {
            return Luma([0]);
        }
        let (mut sum, mut n) = (0.0, 0.0);
        for yy in y.saturating_sub(3)..(y + 4).min(h) {
            for xx in x.saturating_sub(3)..(x + 4).min(w) {
                sum += g(xx, yy);
                n += 1.0;
            }
        }
        let v = 4.0 * (sum / n - g(x, y));
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Where raw vessel maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum VesselSource {
    /// The synthetic ground-truth vessel mask.
    GroundTruth,
    /// `vessel_{id}.png` files in a directory.
    Directory(PathBuf),
    /// [`ridge_filter`] on the original image.
    Ridge,
    /// No repair.
    Disabled,
}

impl VesselSource {
    /// Raw vessel map for one image, or `None` when repair is disabled.
    pub fn raw_map(
        &self,
        id: &str,
        original: &RgbImage,
        ground_truth: Option<&BinaryMask>,
    ) -> Result<Option<GrayImage>, VesselError> {
        match self {
            VesselSource::Disabled => Ok(None),
            VesselSource::Ridge => Ok(Some(ridge_filter(original))),
            VesselSource::GroundTruth => {
                ground_truth
                    .map(|m| Some(m.to_gray()))
                    .ok_or_else(|| VesselError::Source {
                        path: id.into(),
                        reason: "no ground-truth vessel mask for this image".into(),
                    })
            }
            VesselSource::Directory(dir) => {
                let path = dir.join(format!("vessel_{id}.png"));
                load_gray(&path).map(Some)
            }
        }
    }
}

fn load_gray(path: &Path) -> Result<GrayImage, VesselError> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|e| VesselError::Source {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}
