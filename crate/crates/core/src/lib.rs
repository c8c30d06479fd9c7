//! Text-supervised diabetic-retinopathy grading with iterative, saliency-guided
//! lesion localization.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`synthgen`] renders synthetic fundus images with pixel-exact lesion and
//!   vessel ground truth.
//! - [`vlcore`] is the vision-language classifier: hashed n-gram text
//!   embeddings, a small patch transformer, similarity scoring and the
//!   normalized semantic loss, with hand-written backpropagation.
//! - [`saliency`] computes guided-backpropagation saliency and the
//!   mean-plus-one-std binarization.
//! - [`inpaint`] fills masked regions (harmonic baseline or an external tool).
//! - [`vessel`] repairs vessels damaged by inpainting.
//! - [`regression`] runs the grade → localize → inpaint → repair → re-grade loop.
//! - [`evaluation`] computes segmentation and classification metrics.
//! - [`config`] and [`pipeline`] drive everything from a flat key-value file.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod evaluation;
pub mod inpaint;
pub mod mask;
pub mod pipeline;
pub mod plots;
pub mod regression;
pub mod saliency;
pub mod seeds;
pub mod synthgen;
pub mod vessel;
pub mod vlcore;

pub use mask::BinaryMask;

/// Number of DR grade classes (No, Mild, Moderate, Severe, Proliferative).
pub const NUM_GRADES: usize = 5;
/// Number of lesion classes (MA, HE, SE, EX).
pub const NUM_LESIONS: usize = 4;
/// Grade classes followed by lesion classes.
pub const NUM_CLASSES: usize = NUM_GRADES + NUM_LESIONS;

/// Short names of the lesion classes, in label order.
pub const LESION_NAMES: [&str; NUM_LESIONS] = ["MA", "HE", "SE", "EX"];
