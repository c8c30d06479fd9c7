//! Frozen text encoder: hashed n-gram features through a seeded random
//! projection, L2-normalized.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::VlError;
use crate::seeds;
use crate::{LESION_NAMES, NUM_CLASSES, NUM_GRADES, NUM_LESIONS};

pub const DEFAULT_DESCRIPTIONS: &str = include_str!("../../assets/descriptions.txt");

/// Clinical descriptions per class. A class may carry several descriptions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionSet {
    pub grade_descriptions: Vec<(usize, String)>,
    pub lesion_descriptions: Vec<(usize, String)>,
    pub dim: usize,
}

impl DescriptionSet {
    /// Parse `grade.<k> = <text>` / `lesion.<MA|HE|SE|EX> = <text>` lines.
    /// `#` starts a comment line.
    pub fn parse(src: &str, dim: usize) -> Result<Self, VlError> {
        let mut grades = Vec::new();
        let mut lesions = Vec::new();
        let mut problems = Vec::new();
        for (n, raw) in src.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, text)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = text`", n + 1));
                continue;
            };
            let (key, text) = (key.trim(), text.trim().to_string());
            if let Some(k) = key.strip_prefix("grade.") {
                match k.parse::<usize>() {
                    Ok(k) if k < NUM_GRADES => grades.push((k, text)),
                    _ => problems.push(format!("line {}: bad grade index {k:?}", n + 1)),
                }
            } else if let Some(name) = key.strip_prefix("lesion.") {
                match LESION_NAMES
                    .iter()
                    .position(|l| l.eq_ignore_ascii_case(name))
                {
                    Some(k) => lesions.push((k, text)),
                    None => problems.push(format!("line {}: unknown lesion {name:?}", n + 1)),
                }
            } else {
                problems.push(format!("line {}: unknown key {key:?}", n + 1));
            }
        }
        if !problems.is_empty() {
            return Err(VlError::InvalidDescriptions(problems.join("; ")));
        }
        let set = Self {
            grade_descriptions: grades,
            lesion_descriptions: lesions,
            dim,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn default_set(dim: usize) -> Self {
        Self::parse(DEFAULT_DESCRIPTIONS, dim).expect("bundled descriptions are valid")
    }

    pub fn validate(&self) -> Result<(), VlError> {
        if self.dim == 0 {
            return Err(VlError::InvalidDescriptions("embedding dim is 0".into()));
        }
        for (label, list, n) in [
            ("grade", &self.grade_descriptions, NUM_GRADES),
            ("lesion", &self.lesion_descriptions, NUM_LESIONS),
        ] {
            for c in 0..n {
                if !list.iter().any(|(k, _)| *k == c) {
                    return Err(VlError::InvalidDescriptions(format!(
                        "{label} class {c} has no description"
                    )));
                }
            }
            if let Some((k, _)) = list.iter().find(|(k, _)| *k >= n) {
                return Err(VlError::InvalidDescriptions(format!(
                    "{label} class {k} out of range"
                )));
            }
            if let Some((k, _)) = list.iter().find(|(_, t)| t.trim().is_empty()) {
                return Err(VlError::EmptyText(format!("{label}.{k}")));
            }
        }
        Ok(())
    }
}

/// Class text embeddings: 5 grade rows followed by 4 lesion rows, each unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    rows: Array2<f64>,
}

impl TextEmbeddings {
    pub fn from_rows(rows: Array2<f64>) -> Result<Self, VlError> {
        if rows.nrows() != NUM_CLASSES {
            return Err(VlError::Shape(format!(
                "text embeddings need {NUM_CLASSES} rows, got {}",
                rows.nrows()
            )));
        }
        Ok(Self { rows })
    }

    /// All 9 rows (grade block then lesion block).
    pub fn all(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn grade(&self) -> ArrayView2<'_, f64> {
        self.rows.slice(s![..NUM_GRADES, ..])
    }

    pub fn lesion(&self) -> ArrayView2<'_, f64> {
        self.rows.slice(s![NUM_GRADES.., ..])
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Hashed n-gram projection. Word unigrams, word bigrams and character
/// trigrams are each mapped to a fixed Gaussian direction derived from the
/// feature's hash; a text embeds as the normalized count-weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub const DEFAULT_SEED: u64 = 0x7477_6c72_7465_7874;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            seed: Self::DEFAULT_SEED,
        }
    }

    fn features(text: &str) -> BTreeMap<String, f64> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut feats = BTreeMap::new();
        for t in &tokens {
            *feats.entry(format!("w:{t}")).or_insert(0.0) += 1.0;
            let padded: Vec<char> = format!("<{t}>").chars().collect();
            for tri in padded.windows(3) {
                *feats
                    .entry(format!("c:{}", tri.iter().collect::<String>()))
                    .or_insert(0.0) += 0.5;
            }
        }
        for pair in tokens.windows(2) {
            *feats
                .entry(format!("b:{} {}", pair[0], pair[1]))
                .or_insert(0.0) += 1.0;
        }
        feats
    }

    fn direction(&self, feature: &str) -> Array1<f64> {
        let mut rng = seeds::rng_from(seeds::mix(self.seed ^ seeds::fnv1a(feature.as_bytes())));
        Array1::from_iter((0..self.dim).map(|_| StandardNormal.sample(&mut rng)))
    }

    /// Unit-norm embedding of one text.
    pub fn encode(&self, text: &str) -> Result<Array1<f64>, VlError> {
        let feats = Self::features(text);
        if feats.is_empty() {
            return Err(VlError::EmptyText(text.to_string()));
        }
        let mut v = Array1::zeros(self.dim);
        for (f, w) in &feats {
            v.scaled_add(*w, &self.direction(f));
        }
        Ok(normalize(v))
    }
}

pub(crate) fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Embed every class: descriptions of one class are mean-pooled, then the
/// class row is re-normalized.
pub fn encode_text(descriptions: &DescriptionSet) -> Result<TextEmbeddings, VlError> {
    encode_text_with(descriptions, &TextEncoder::new(descriptions.dim))
}

pub fn encode_text_with(
    descriptions: &DescriptionSet,
    encoder: &TextEncoder,
) -> Result<TextEmbeddings, VlError> {
    descriptions.validate()?;
    let mut rows = Array2::zeros((NUM_CLASSES, descriptions.dim));
    for (offset, list, n) in [
        (0, &descriptions.grade_descriptions, NUM_GRADES),
        (NUM_GRADES, &descriptions.lesion_descriptions, NUM_LESIONS),
    ] {
        for c in 0..n {
            let mut acc = Array1::zeros(descriptions.dim);
            let mut count = 0.0;
            for (_, text) in list.iter().filter(|(k, _)| *k == c) {
                acc += &encoder.encode(text)?;
                count += 1.0;
            }
            rows.row_mut(offset + c).assign(&normalize(acc / count));
        }
    }
    TextEmbeddings::from_rows(rows)
}
