//! Self-describing JSON checkpoint: metadata plus every named tensor.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, TextEmbeddings, VlError, VlModel};
use crate::seeds;

pub const CHECKPOINT_VERSION: &str = "twlr-ckpt-1";

#[derive(Serialize, Deserialize)]
struct Meta {
    patch_size: usize,
    dim: usize,
    layers: usize,
    heads: usize,
    ff_dim: usize,
    image_size: usize,
    temperature: f64,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    version: String,
    meta: Meta,
    tensors: Vec<Tensor>,
}

const TEXT_TENSOR: &str = "text.embeddings";

fn to_container(model: &VlModel) -> Container {
    let p = &model.params;
    let c = p.config;
    let mut tensors: Vec<Tensor> = p
        .tensors()
        .into_iter()
        .filter(|(name, _, _)| name != "temperature")
        .map(|(name, shape, data)| Tensor {
            name,
            shape,
            data: data.to_vec(),
        })
        .collect();
    let text = model.text.all();
    tensors.push(Tensor {
        name: TEXT_TENSOR.into(),
        shape: text.shape().to_vec(),
        data: text.iter().copied().collect(),
    });
    Container {
        version: CHECKPOINT_VERSION.into(),
        meta: Meta {
            patch_size: c.patch_size,
            dim: c.dim,
            layers: c.layers,
            heads: c.heads,
            ff_dim: c.ff_dim,
            image_size: c.image_size,
            temperature: p.temperature,
        },
        tensors,
    }
}

fn from_container(c: Container) -> Result<VlModel, VlError> {
    if c.version != CHECKPOINT_VERSION {
        return Err(VlError::Checkpoint(format!(
            "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
            c.version
        )));
    }
    let config = EncoderConfig {
        image_size: c.meta.image_size,
        patch_size: c.meta.patch_size,
        dim: c.meta.dim,
        layers: c.meta.layers,
        heads: c.meta.heads,
        ff_dim: c.meta.ff_dim,
    };
    // Shapes come from a throwaway init; values are overwritten below.
    let mut params = EncoderParams::init(config, &mut seeds::rng_from(0))?;
    params.temperature = c.meta.temperature;
    if !(params.temperature > 0.0) {
        return Err(VlError::Checkpoint("temperature must be positive".into()));
    }
    let mut text = None;
    let mut found = 0;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    {
        let mut slots = params.tensors_mut();
        for t in c.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(VlError::Checkpoint(format!(
                    "tensor {} data/shape mismatch",
                    t.name
                )));
            }
            if t.name == TEXT_TENSOR {
                let rows = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                    .map_err(|e| VlError::Checkpoint(e.to_string()))?;
                text = Some(TextEmbeddings::from_rows(rows)?);
                continue;
            }
            let Some(idx) = expected.iter().position(|(n, _)| *n == t.name) else {
                return Err(VlError::Checkpoint(format!("unknown tensor {}", t.name)));
            };
            if expected[idx].1 != t.shape {
                return Err(VlError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, t.shape, expected[idx].1
                )));
            }
            slots[idx].1.copy_from_slice(&t.data);
            found += 1;
        }
    }
    if found != expected.len() - 1 {
        return Err(VlError::Checkpoint(format!(
            "expected {} tensors, found {found}",
            expected.len() - 1
        )));
    }
    if !params.is_finite() {
        return Err(VlError::Checkpoint("non-finite parameter values".into()));
    }
    let text = text.ok_or_else(|| VlError::Checkpoint(format!("missing {TEXT_TENSOR}")))?;
    VlModel::new(params, text)
}

pub fn save_checkpoint(model: &VlModel, path: &Path) -> Result<(), VlError> {
    let json = serde_json::to_string(&to_container(model))
        .map_err(|e| VlError::Checkpoint(e.to_string()))?;
    fs::write(path, json).map_err(|source| VlError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<VlModel, VlError> {
    let raw = fs::read_to_string(path).map_err(|source| VlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let c: Container =
        serde_json::from_str(&raw).map_err(|e| VlError::Checkpoint(e.to_string()))?;
    from_container(c)
}
