//! Guided-backpropagation saliency and mean-plus-one-std binarization.

use image::{GrayImage, Luma};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::vlcore::{encoder_input, BackwardMode, EncoderParams, TextEmbeddings, VlError};
use crate::NUM_GRADES;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("target class {0} is not a grade")]
    InvalidClass(usize),
    #[error(transparent)]
    Model(#[from] VlError),
    #[error("non-finite saliency ({count} values, first at pixel {first})")]
    NonFinite { count: usize, first: usize },
}

/// Non-negative per-pixel saliency, row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub source_class: usize,
    pub iteration: usize,
}

/// Min/max used to render a map to 8 bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl SaliencyMap {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    /// Min-max normalized grayscale rendering. A flat map renders black.
    pub fn to_gray(&self) -> (GrayImage, Normalization) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let img = GrayImage::from_fn(self.width, self.height, |x, y| {
            let v = if span > 0.0 {
                (self.get(x, y) - min) / span
            } else {
                0.0
            };
            Luma([(v * 255.0).round() as u8])
        });
        (img, Normalization { min, max })
    }
}

/// Gradient of the `target_class` similarity score w.r.t. the input pixels,
/// with guided ReLU backward. A pixel's saliency is the largest absolute
/// gradient over its three channels.
pub fn guided_backprop(
    image: &image::RgbImage,
    params: &EncoderParams,
    text: &TextEmbeddings,
    target_class: usize,
) -> Result<SaliencyMap, SaliencyError> {
    if target_class >= NUM_GRADES {
        return Err(SaliencyError::InvalidClass(target_class));
    }
    let cfg = &params.config;
    let input = encoder_input(image, cfg)?;
    let cache = params.forward(&input)?;
    // d s_c / d e is the class text row
    let d_embedding: Array1<f64> = text.all().row(target_class).to_owned();
    let (_, d_input) = params.backward(&cache, &d_embedding, BackwardMode::Guided, false);

    let size = cfg.image_size;
    let p = cfg.patch_size;
    let grid = size / p;
    let mut values = vec![0.0; size * size];
    for (j, row) in d_input.rows().into_iter().enumerate() {
        let (gx, gy) = (j % grid, j / grid);
        for y in 0..p {
            for x in 0..p {
                let i = (y * p + x) * 3;
                // input = v/255 - 0.5, so d/dv carries a 1/255 factor
                let m = row[i].abs().max(row[i + 1].abs()).max(row[i + 2].abs()) / 255.0;
                values[(gy * p + y) * size + gx * p + x] = m;
            }
        }
    }
    let bad: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if let Some(&first) = bad.first() {
        return Err(SaliencyError::NonFinite {
            count: bad.len(),
            first,
        });
    }
    Ok(SaliencyMap {
        width: size as u32,
        height: size as u32,
        values,
        source_class: target_class,
        iteration: 0,
    })
}

/// Mean and population standard deviation of the map.
pub fn map_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pixels strictly above the map's own mean plus one standard deviation.
pub fn binarize(saliency: &SaliencyMap) -> BinaryMask {
    let (mean, std) = map_stats(&saliency.values);
    let threshold = mean + std;
    BinaryMask::from_vec(
        saliency.width,
        saliency.height,
        saliency.values.iter().map(|&v| v > threshold).collect(),
    )
}
