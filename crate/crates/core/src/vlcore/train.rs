//! Mini-batch training of the image encoder against frozen text embeddings.

use image::{imageops, RgbImage};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{loss_and_score_grad, predict, semantic_loss, similarity_scores, TargetVector};
use super::{encoder_input, BackwardMode, EncoderParams, TextEmbeddings, VlError};
use crate::seeds;
use crate::NUM_CLASSES;

/// An image with its multi-hot target.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub target: TargetVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) moments.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Random flips and quarter turns at training time.
    pub augment: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Sgd,
            augment: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), VlError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VlError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(VlError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Full-batch loss before the first update.
    pub initial_loss: f64,
    /// Full-batch loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

const MIN_TEMPERATURE: f64 = 1e-2;
const MAX_TEMPERATURE: f64 = 100.0;

/// Loss and full parameter gradient (temperature included) for one prepared input.
pub fn sample_gradients(
    params: &EncoderParams,
    text: &TextEmbeddings,
    input: &Array2<f64>,
    target: &TargetVector,
) -> Result<(f64, EncoderParams), VlError> {
    let cache = params.forward(input)?;
    let scores = similarity_scores(text, &cache.embedding)?;
    let (loss, ds, dtau) = loss_and_score_grad(&scores, params.temperature, target);
    let ds = ndarray::Array1::from_iter(ds);
    let de = text.all().t().dot(&ds);
    let (grads, _) = params.backward(&cache, &de, BackwardMode::Standard, true);
    let mut grads = grads.expect("requested");
    grads.temperature = dtau;
    Ok((loss, grads))
}

/// Mean semantic loss over the whole set, unaugmented.
pub fn full_batch_loss(
    params: &EncoderParams,
    text: &TextEmbeddings,
    data: &[LabeledImage],
) -> Result<f64, VlError> {
    let preds = data
        .par_iter()
        .map(|d| {
            let input = encoder_input(&d.image, &params.config)?;
            let e = params.forward(&input)?.embedding;
            Ok(predict(&similarity_scores(text, &e)?, params.temperature).probs)
        })
        .collect::<Result<Vec<[f64; NUM_CLASSES]>, VlError>>()?;
    let targets: Vec<TargetVector> = data.iter().map(|d| d.target.clone()).collect();
    semantic_loss(&preds, &targets)
}

fn augment(image: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let mut img = match rng.random_range(0..4) {
        0 => image.clone(),
        1 => imageops::rotate90(image),
        2 => imageops::rotate180(image),
        _ => imageops::rotate270(image),
    };
    if rng.random_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut img);
    }
    img
}

struct AdamState {
    m: EncoderParams,
    v: EncoderParams,
    step: i32,
}

impl AdamState {
    fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((_, p), (_, m)), ((_, v), (_, _, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(ms)
            .zip(vs.into_iter().zip(gs))
        {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Train the encoder (and temperature) with text embeddings frozen.
///
/// Per-sample gradients inside a batch are computed in parallel and reduced
/// in sample order, so results do not depend on the thread count.
pub fn train(
    data: &[LabeledImage],
    params: EncoderParams,
    text: &TextEmbeddings,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, VlError> {
    if data.is_empty() {
        return Err(VlError::InvalidInput("empty training set".into()));
    }
    hyper.validate()?;
    let mut params = params;
    let initial_loss = full_batch_loss(&params, text, data)?;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut rng = seeds::rng_from(seeds::derive_seed(hyper.seed, "train.shuffle"));
    let mut adam = (hyper.optimizer == Optimizer::Adam).then(|| AdamState {
        m: params.zeros_like(),
        v: params.zeros_like(),
        step: 0,
    });

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let img = if hyper.augment {
                        augment(&data[i].image, &mut rng)
                    } else {
                        data[i].image.clone()
                    };
                    encoder_input(&img, &params.config)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let per_sample = batch
                .par_iter()
                .zip(inputs.par_iter())
                .map(|(&i, input)| sample_gradients(&params, text, input, &data[i].target))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for (l, g) in &per_sample {
                loss += l * inv;
                grad.axpy(inv, g);
            }
            if !loss.is_finite() || !grad.is_finite() {
                return Err(VlError::Diverged { epoch, loss });
            }
            match adam.as_mut() {
                Some(state) => state.update(&mut params, &grad, hyper.lr),
                None => params.axpy(-hyper.lr, &grad),
            }
            params.temperature = params.temperature.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
        }
        let loss = full_batch_loss(&params, text, data)?;
        if !loss.is_finite() {
            return Err(VlError::Diverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.5}");
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        epoch_losses,
    })
}
