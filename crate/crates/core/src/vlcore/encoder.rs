//! Patch transformer image encoder with explicit backpropagation.
//!
//! Layout: flattened patches are projected by `proj` and offset by positional
//! embeddings, a learned cls token is prepended, and `layers` pre-LN
//! transformer blocks (multi-head self-attention, then a ReLU feed-forward,
//! each with a residual connection) are applied. The image embedding is the
//! final cls row, L2-normalized.
//!
//! The backward pass is written out by hand so that the same code serves
//! training (all parameter gradients) and guided backpropagation (input
//! gradient only, with the guided ReLU rule).

use image::{Rgb, RgbImage};
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VlError;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
        }
    }
}

impl EncoderConfig {
    /// N = H·W / P².
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// P²·3.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), VlError> {
        let bad = |m: String| Err(VlError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable state of the image side, including the temperature.
///
/// The same struct doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// (P²·3) × D patch projection.
    pub proj: Array2<f64>,
    /// (N+1) × D; row 0 belongs to the cls token.
    pub pos: Array2<f64>,
    pub cls: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub temperature: f64,
}

fn randn(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self, VlError> {
        config.validate()?;
        let d = config.dim;
        let f = config.ff_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let proj = randn(
            rng,
            (config.patch_len(), d),
            1.0 / (config.patch_len() as f64).sqrt(),
        );
        let pos = randn(rng, (config.num_patches() + 1, d), 0.1);
        let cls = randn(rng, (1, d), 0.1).remove_axis(Axis(0));
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: randn(rng, (d, d), sd),
                wk: randn(rng, (d, d), sd),
                wv: randn(rng, (d, d), sd),
                wo: randn(rng, (d, d), sd),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w1: randn(rng, (d, f), sd),
                b1: Array1::zeros(f),
                w2: randn(rng, (f, d), 1.0 / (f as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            proj,
            pos,
            cls,
            layers,
            temperature: 10.0,
        })
    }

    /// Same shapes, all zeros (temperature included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every trainable tensor with its name and shape, in a fixed order.
    pub fn tensors<'a>(&'a self) -> Vec<(String, Vec<usize>, &'a [f64])> {
        fn a1(a: &Array1<f64>) -> (Vec<usize>, &[f64]) {
            (vec![a.len()], a.as_slice().expect("contiguous"))
        }
        fn a2(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
            (a.shape().to_vec(), a.as_slice().expect("contiguous"))
        }
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mut push = |name: String, (shape, data): (Vec<usize>, &'a [f64])| {
            out.push((name, shape, data));
        };
        push("proj".into(), a2(&self.proj));
        push("pos".into(), a2(&self.pos));
        push("cls".into(), a1(&self.cls));
        push(
            "temperature".into(),
            (vec![1], std::slice::from_ref(&self.temperature)),
        );
        for (i, l) in self.layers.iter().enumerate() {
            push(format!("layer{i}.ln1_gain"), a1(&l.ln1_gain));
            push(format!("layer{i}.ln1_bias"), a1(&l.ln1_bias));
            push(format!("layer{i}.wq"), a2(&l.wq));
            push(format!("layer{i}.wk"), a2(&l.wk));
            push(format!("layer{i}.wv"), a2(&l.wv));
            push(format!("layer{i}.wo"), a2(&l.wo));
            push(format!("layer{i}.ln2_gain"), a1(&l.ln2_gain));
            push(format!("layer{i}.ln2_bias"), a1(&l.ln2_bias));
            push(format!("layer{i}.w1"), a2(&l.w1));
            push(format!("layer{i}.b1"), a1(&l.b1));
            push(format!("layer{i}.w2"), a2(&l.w2));
            push(format!("layer{i}.b2"), a1(&l.b2));
        }
        out
    }

    /// Mutable view of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("proj".into(), m2(&mut self.proj)),
            ("pos".into(), m2(&mut self.pos)),
            ("cls".into(), m1(&mut self.cls)),
            (
                "temperature".into(),
                std::slice::from_mut(&mut self.temperature),
            ),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), m1(&mut l.ln1_gain)));
            out.push((format!("layer{i}.ln1_bias"), m1(&mut l.ln1_bias)));
            out.push((format!("layer{i}.wq"), m2(&mut l.wq)));
            out.push((format!("layer{i}.wk"), m2(&mut l.wk)));
            out.push((format!("layer{i}.wv"), m2(&mut l.wv)));
            out.push((format!("layer{i}.wo"), m2(&mut l.wo)));
            out.push((format!("layer{i}.ln2_gain"), m1(&mut l.ln2_gain)));
            out.push((format!("layer{i}.ln2_bias"), m1(&mut l.ln2_bias)));
            out.push((format!("layer{i}.w1"), m2(&mut l.w1)));
            out.push((format!("layer{i}.b1"), m1(&mut l.b1)));
            out.push((format!("layer{i}.w2"), m2(&mut l.w2)));
            out.push((format!("layer{i}.b2"), m1(&mut l.b2)));
        }
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// Split an image into N row-major patches, each flattened (row, column,
/// channel) to length P²·3. Values are raw intensities.
pub fn patchify(image: &RgbImage, patch_size: usize) -> Result<Array2<f64>, VlError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(VlError::Shape(format!(
            "{w}x{h} image not divisible into {patch_size}px patches"
        )));
    }
    let (gx, gy) = (w / patch_size, h / patch_size);
    let len = patch_size * patch_size * 3;
    let mut out = Array2::zeros((gx * gy, len));
    for py in 0..gy {
        for px in 0..gx {
            let mut row = out.row_mut(py * gx + px);
            let mut i = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    let p =
                        image.get_pixel((px * patch_size + x) as u32, (py * patch_size + y) as u32);
                    for c in 0..3 {
                        row[i] = f64::from(p.0[c]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]. Values are rounded and clamped to 8 bits.
pub fn unpatchify(
    patches: &Array2<f64>,
    width: usize,
    height: usize,
    patch_size: usize,
) -> Result<RgbImage, VlError> {
    let gx = width / patch_size;
    if patches.nrows() != gx * (height / patch_size)
        || patches.ncols() != patch_size * patch_size * 3
    {
        return Err(VlError::Shape(format!(
            "{:?} patches do not tile {width}x{height}",
            patches.dim()
        )));
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (j, row) in patches.rows().into_iter().enumerate() {
        let (px, py) = (j % gx, j / gx);
        for y in 0..patch_size {
            for x in 0..patch_size {
                let i = (y * patch_size + x) * 3;
                let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
                img.put_pixel(
                    (px * patch_size + x) as u32,
                    (py * patch_size + y) as u32,
                    Rgb([q(row[i]), q(row[i + 1]), q(row[i + 2])]),
                );
            }
        }
    }
    Ok(img)
}

/// Patches scaled to roughly [-0.5, 0.5]: `v / 255 - 0.5`.
pub fn encoder_input(image: &RgbImage, config: &EncoderConfig) -> Result<Array2<f64>, VlError> {
    if image.width() as usize != config.image_size || image.height() as usize != config.image_size {
        return Err(VlError::Shape(format!(
            "image {}x{} but encoder expects {}x{}",
            image.width(),
            image.height(),
            config.image_size,
            config.image_size
        )));
    }
    Ok(patchify(image, config.patch_size)?.mapv(|v| v / 255.0 - 0.5))
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns (dx, dgain, dbias).
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let mut dx = dy * gain;
    for ((mut row, xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &x| *g = inv * (*g - m1 - x * m2));
    }
    (dx, dgain, dbias)
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    f1: Array2<f64>,
    r: Array2<f64>,
}

/// Intermediate activations of one forward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    cls_norm: f64,
    /// Unit-norm image embedding.
    pub embedding: Array1<f64>,
}

/// How the backward pass treats ReLU units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    /// Ordinary gradient: pass where the forward pre-activation is positive.
    Standard,
    /// Guided backpropagation: additionally zero negative incoming gradients.
    Guided,
}

impl EncoderParams {
    /// Forward pass on prepared input patches (see [`encoder_input`]).
    pub fn forward(&self, input: &Array2<f64>) -> Result<ForwardCache, VlError> {
        let cfg = &self.config;
        if input.dim() != (cfg.num_patches(), cfg.patch_len()) {
            return Err(VlError::Shape(format!(
                "input {:?}, expected ({}, {})",
                input.dim(),
                cfg.num_patches(),
                cfg.patch_len()
            )));
        }
        let n = cfg.num_patches() + 1;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut z = Array2::zeros((n, cfg.dim));
        z.row_mut(0).assign(&self.cls);
        z.slice_mut(s![1.., ..]).assign(&input.dot(&self.proj));
        z += &self.pos;

        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (h1, ln1) = layer_norm(&z, &l.ln1_gain, &l.ln1_bias);
            let q = h1.dot(&l.wq);
            let k = h1.dot(&l.wk);
            let v = h1.dot(&l.wv);
            let mut o = Array2::zeros((n, cfg.dim));
            let mut attn = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut a);
                o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                attn.push(a);
            }
            let z_mid = &z + &o.dot(&l.wo);
            let (h2, ln2) = layer_norm(&z_mid, &l.ln2_gain, &l.ln2_bias);
            let f1 = h2.dot(&l.w1) + &l.b1;
            let r = f1.mapv(|v| v.max(0.0));
            z = &z_mid + &(r.dot(&l.w2) + &l.b2);
            caches.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                h2,
                f1,
                r,
            });
        }
        let cls_out = z.row(0).to_owned();
        let cls_norm = cls_out.dot(&cls_out).sqrt();
        if !cls_norm.is_finite() {
            return Err(VlError::InvalidInput("non-finite encoder output".into()));
        }
        let embedding = if cls_norm > 0.0 {
            cls_out / cls_norm
        } else {
            cls_out
        };
        Ok(ForwardCache {
            input: input.clone(),
            layers: caches,
            cls_norm,
            embedding,
        })
    }

    /// Backpropagate `d_embedding` (gradient w.r.t. the unit-norm embedding).
    ///
    /// Returns parameter gradients when `param_grads` is set (the temperature
    /// entry is left at zero; the head owns it) and always the gradient with
    /// respect to the prepared input patches.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_embedding: &Array1<f64>,
        mode: BackwardMode,
        param_grads: bool,
    ) -> (Option<EncoderParams>, Array2<f64>) {
        let cfg = &self.config;
        let n = cfg.num_patches() + 1;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = param_grads.then(|| self.zeros_like());

        // e = c / |c|  =>  dc = (de - e (e·de)) / |c|
        let e = &cache.embedding;
        let d_cls = if cache.cls_norm > 0.0 {
            (d_embedding - &(e * e.dot(d_embedding))) / cache.cls_norm
        } else {
            d_embedding.clone()
        };
        let mut dz = Array2::zeros((n, cfg.dim));
        dz.row_mut(0).assign(&d_cls);

        for (li, (l, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            // feed-forward branch: z_out = z_mid + relu(h2 w1 + b1) w2 + b2
            let dr = dz.dot(&l.w2.t());
            let mut df1 = dr;
            Zip::from(&mut df1).and(&c.f1).for_each(|g, &pre| {
                let pass = pre > 0.0 && (mode == BackwardMode::Standard || *g > 0.0);
                if !pass {
                    *g = 0.0;
                }
            });
            let dh2 = df1.dot(&l.w1.t());
            let (dz_ln2, dg2, db2ln) = layer_norm_backward(&dh2, &c.ln2, &l.ln2_gain);
            let dz_mid = &dz + &dz_ln2;

            // attention branch: z_mid = z_in + o wo
            let d_o = dz_mid.dot(&l.wo.t());
            let mut dq = Array2::zeros((n, cfg.dim));
            let mut dk = Array2::zeros((n, cfg.dim));
            let mut dv = Array2::zeros((n, cfg.dim));
            for (h, a) in c.attn.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let doh = d_o.slice(cols);
                let da = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&doh));
                let mut dscore = a * &da;
                let rowsum = dscore.sum_axis(Axis(1));
                Zip::from(dscore.rows_mut())
                    .and(a.rows())
                    .and(&rowsum)
                    .for_each(|mut ds, ar, &rs| {
                        Zip::from(&mut ds).and(&ar).for_each(|g, &p| *g -= p * rs);
                    });
                dscore *= scale;
                dq.slice_mut(cols).assign(&dscore.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscore.t().dot(&c.q.slice(cols)));
            }
            let dh1 = dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t());
            let (dz_ln1, dg1, db1ln) = layer_norm_backward(&dh1, &c.ln1, &l.ln1_gain);

            if let Some(g) = grads.as_mut() {
                let gl = &mut g.layers[li];
                gl.w2 = c.r.t().dot(&dz);
                gl.b2 = dz.sum_axis(Axis(0));
                gl.w1 = c.h2.t().dot(&df1);
                gl.b1 = df1.sum_axis(Axis(0));
                gl.ln2_gain = dg2;
                gl.ln2_bias = db2ln;
                gl.wo = c.o.t().dot(&dz_mid);
                gl.wq = c.h1.t().dot(&dq);
                gl.wk = c.h1.t().dot(&dk);
                gl.wv = c.h1.t().dot(&dv);
                gl.ln1_gain = dg1;
                gl.ln1_bias = db1ln;
            }
            dz = dz_mid + dz_ln1;
        }

        let d_patch_embed = dz.slice(s![1.., ..]);
        let d_input = d_patch_embed.dot(&self.proj.t());
        if let Some(g) = grads.as_mut() {
            g.cls = dz.row(0).to_owned();
            g.pos = dz.clone();
            g.proj = cache.input.t().dot(&d_patch_embed);
        }
        (grads, d_input)
    }
}

/// Unit-norm D-vector embedding of an image.
pub fn encode_image(image: &RgbImage, params: &EncoderParams) -> Result<Array1<f64>, VlError> {
    let input = encoder_input(image, &params.config)?;
    Ok(params.forward(&input)?.embedding)
}
