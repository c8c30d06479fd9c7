//! The severity-regression loop: grade, localize, inpaint, repair, re-grade,
//! until the image is no longer referable.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inpaint::{InpaintError, Inpainter};
use crate::mask::BinaryMask;
use crate::saliency::{binarize, guided_backprop, Normalization, SaliencyMap};
use crate::seeds;
use crate::vessel::{repair, ColorParams, VesselError};
use crate::vlcore::{PredictionRecord, VlModel};
use crate::NUM_CLASSES;

pub type ModelError = Box<dyn std::error::Error + Send + Sync>;

/// What the loop needs from a classifier.
pub trait GradingModel: Send + Sync {
    fn predict(&self, image: &RgbImage) -> Result<PredictionRecord, ModelError>;
    fn saliency(&self, image: &RgbImage, target_class: usize) -> Result<SaliencyMap, ModelError>;
}

impl GradingModel for VlModel {
    fn predict(&self, image: &RgbImage) -> Result<PredictionRecord, ModelError> {
        Ok(self.predict_image(image)?)
    }

    fn saliency(&self, image: &RgbImage, target_class: usize) -> Result<SaliencyMap, ModelError> {
        Ok(guided_backprop(
            image,
            &self.params,
            &self.text,
            target_class,
        )?)
    }
}

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("invalid loop settings: {0}")]
    Config(String),
    #[error("model failed at iteration {iteration}: {source}")]
    Model {
        iteration: usize,
        #[source]
        source: ModelError,
    },
    #[error("inpainting failed at iteration {iteration}: {source}")]
    Inpaint {
        iteration: usize,
        #[source]
        source: InpaintError,
    },
    #[error("vessel repair failed at iteration {iteration}: {source}")]
    Repair {
        iteration: usize,
        #[source]
        source: VesselError,
    },
    #[error("trace i/o at {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Grades 2, 3 and 4 need referral.
pub fn classify_referable(c_hat: usize) -> bool {
    (2..=4).contains(&c_hat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    pub max_iterations: usize,
    /// Grow each binary mask by one pixel (3×3 cross) before inpainting.
    pub dilate: bool,
    pub color: ColorParams,
    /// Base seed for vessel-colour noise; mixed with the iteration index.
    pub seed: u64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            dilate: false,
            color: ColorParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Nonreferable,
    MaxIterations,
    InpaintDegenerate,
}

/// One completed inpaint cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    /// 1-based.
    pub iteration: usize,
    /// Prediction on the image entering this cycle.
    pub entering: PredictionRecord,
    /// Prediction on the repaired image leaving it.
    pub regraded: PredictionRecord,
    pub saliency: SaliencyMap,
    pub binary_mask: BinaryMask,
    pub accumulated_mask: BinaryMask,
    pub inpainted: RgbImage,
    pub repaired: RgbImage,
    pub repair_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopResult {
    pub initial: PredictionRecord,
    pub final_prediction: PredictionRecord,
    pub final_image: RgbImage,
    pub accumulated_mask: BinaryMask,
    /// Completed inpaint cycles.
    pub iterations: usize,
    pub termination: TerminationReason,
    /// Set when a referable prediction produced an empty saliency mask.
    pub stalled: bool,
    pub dilated: bool,
    pub traces: Vec<IterationTrace>,
}

impl LoopResult {
    /// Predicted grade after each cycle, starting with the entry prediction.
    pub fn grade_path(&self) -> Vec<usize> {
        std::iter::once(self.initial.grade)
            .chain(self.traces.iter().map(|t| t.regraded.grade))
            .collect()
    }
}

/// Run the loop on one image. `raw_vessels` of `None` disables repair.
pub fn run_loop(
    image: &RgbImage,
    raw_vessels: Option<&GrayImage>,
    model: &dyn GradingModel,
    inpainter: &dyn Inpainter,
    params: &LoopParams,
) -> Result<LoopResult, RegressionError> {
    if params.max_iterations == 0 {
        return Err(RegressionError::Config(
            "max_iterations must be >= 1".into(),
        ));
    }
    let model_err = |iteration| move |source| RegressionError::Model { iteration, source };
    let (w, h) = image.dimensions();
    let initial = model.predict(image).map_err(model_err(0))?;
    let mut pred = initial.clone();
    let mut current = image.clone();
    let mut accumulated = BinaryMask::empty(w, h);
    let mut traces = Vec::new();
    let mut stalled = false;

    let termination = loop {
        if !classify_referable(pred.grade) {
            break TerminationReason::Nonreferable;
        }
        if traces.len() == params.max_iterations {
            break TerminationReason::MaxIterations;
        }
        let t = traces.len() + 1;
        let mut saliency = model.saliency(&current, pred.grade).map_err(model_err(t))?;
        saliency.iteration = t;
        let mut mask = binarize(&saliency);
        if params.dilate {
            mask = mask.dilate_cross();
        }
        if mask.is_empty() {
            log::debug!("iteration {t}: flat saliency, stopping");
            stalled = true;
            break TerminationReason::MaxIterations;
        }
        let inpainted = match inpainter.inpaint(&current, &mask) {
            Ok(img) => img,
            Err(InpaintError::FullMask) => break TerminationReason::InpaintDegenerate,
            Err(source) => {
                return Err(RegressionError::Inpaint {
                    iteration: t,
                    source,
                })
            }
        };
        accumulated.union_in_place(&mask);
        let (repaired, repair_skipped) = match raw_vessels {
            Some(raw) => {
                let seed = seeds::derive_indexed(params.seed, "repair", &[t as u64]);
                let out = repair(&inpainted, image, raw, &mask, &params.color, seed).map_err(
                    |source| RegressionError::Repair {
                        iteration: t,
                        source,
                    },
                )?;
                (out.image, out.skipped)
            }
            None => (inpainted.clone(), true),
        };
        let regraded = model.predict(&repaired).map_err(model_err(t))?;
        traces.push(IterationTrace {
            iteration: t,
            entering: pred,
            regraded: regraded.clone(),
            saliency,
            binary_mask: mask,
            accumulated_mask: accumulated.clone(),
            inpainted,
            repaired: repaired.clone(),
            repair_skipped,
        });
        current = repaired;
        pred = regraded;
    };

    Ok(LoopResult {
        initial,
        final_prediction: pred,
        final_image: current,
        accumulated_mask: accumulated,
        iterations: traces.len(),
        termination,
        stalled,
        dilated: params.dilate,
        traces,
    })
}

/// One image queued for [`run_batch`].
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub id: String,
    pub image: RgbImage,
    pub raw_vessels: Option<GrayImage>,
}

/// Per-image loops in parallel. Output order follows input order and one
/// image failing does not affect the others. Each image gets its own repair
/// seed derived from `params.seed` and its id.
pub fn run_batch(
    items: &[BatchItem],
    model: &dyn GradingModel,
    inpainter: &dyn Inpainter,
    params: &LoopParams,
    workers: usize,
) -> Result<Vec<Result<LoopResult, RegressionError>>, RegressionError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RegressionError::Config(e.to_string()))?;
    Ok(pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let p = LoopParams {
                    seed: seeds::derive_seed(params.seed, &item.id),
                    ..params.clone()
                };
                run_loop(&item.image, item.raw_vessels.as_ref(), model, inpainter, &p)
            })
            .collect()
    }))
}

/// Serializable per-iteration summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub entering_class: usize,
    pub entering_probs: [f64; NUM_CLASSES],
    pub class: usize,
    pub probs: [f64; NUM_CLASSES],
    pub mask_pixels: usize,
    pub accumulated_pixels: usize,
    pub repair_skipped: bool,
}

/// Contents of `trace.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub initial_class: usize,
    pub initial_probs: [f64; NUM_CLASSES],
    pub final_class: usize,
    pub iterations: usize,
    pub termination_reason: TerminationReason,
    pub stalled: bool,
    pub dilated: bool,
    pub per_iteration: Vec<IterationRecord>,
}

impl TraceRecord {
    pub fn from_result(id: &str, r: &LoopResult) -> Self {
        Self {
            id: id.to_string(),
            initial_class: r.initial.grade,
            initial_probs: r.initial.probs,
            final_class: r.final_prediction.grade,
            iterations: r.iterations,
            termination_reason: r.termination,
            stalled: r.stalled,
            dilated: r.dilated,
            per_iteration: r
                .traces
                .iter()
                .map(|t| IterationRecord {
                    iteration: t.iteration,
                    entering_class: t.entering.grade,
                    entering_probs: t.entering.probs,
                    class: t.regraded.grade,
                    probs: t.regraded.probs,
                    mask_pixels: t.binary_mask.pixel_count(),
                    accumulated_pixels: t.accumulated_mask.pixel_count(),
                    repair_skipped: t.repair_skipped,
                })
                .collect(),
        }
    }

    /// Predicted class after each cycle, entry prediction first.
    pub fn grade_path(&self) -> Vec<usize> {
        std::iter::once(self.initial_class)
            .chain(self.per_iteration.iter().map(|r| r.class))
            .collect()
    }
}

pub const TRACE_FILE: &str = "trace.json";
pub const FINAL_MASK_FILE: &str = "final_mask.png";

fn io_err(path: &Path, e: impl std::fmt::Display) -> RegressionError {
    RegressionError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<(), RegressionError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RegressionError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, s + "\n").map_err(|e| io_err(path, e))
}

/// Write all artifacts of one loop into `dir`.
pub fn write_trace_dir(
    dir: &Path,
    id: &str,
    original: &RgbImage,
    result: &LoopResult,
) -> Result<(), RegressionError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_png(original, &dir.join("original.png"))?;
    for t in &result.traces {
        let i = t.iteration;
        let (sal, norm): (GrayImage, Normalization) = t.saliency.to_gray();
        save_png(&sal, &dir.join(format!("iter_{i}_saliency.png")))?;
        write_json(&dir.join(format!("iter_{i}_saliency.json")), &norm)?;
        save_png(
            &t.binary_mask.to_gray(),
            &dir.join(format!("iter_{i}_mask.png")),
        )?;
        save_png(&t.inpainted, &dir.join(format!("iter_{i}_inpainted.png")))?;
        save_png(&t.repaired, &dir.join(format!("iter_{i}_repaired.png")))?;
    }
    save_png(
        &result.accumulated_mask.to_gray(),
        &dir.join(FINAL_MASK_FILE),
    )?;
    write_json(&dir.join(TRACE_FILE), &TraceRecord::from_result(id, result))
}

pub fn read_trace_record(dir: &Path) -> Result<TraceRecord, RegressionError> {
    let path = dir.join(TRACE_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&raw).map_err(|e| io_err(&path, e))
}

pub fn read_final_mask(dir: &Path) -> Result<BinaryMask, RegressionError> {
    let path = dir.join(FINAL_MASK_FILE);
    let img = image::open(&path).map_err(|e| io_err(&path, e))?;
    Ok(BinaryMask::from_gray(&img.to_luma8()))
}
