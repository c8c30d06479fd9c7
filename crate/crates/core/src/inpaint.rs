//! Mask-driven inpainting: a built-in harmonic fill plus an external-command adapter.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use image::RgbImage;
use thiserror::Error;

use crate::mask::BinaryMask;

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("mask is {mask_w}x{mask_h}, image is {img_w}x{img_h}")]
    ShapeMismatch {
        img_w: u32,
        img_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("mask covers the whole image; nothing to fill from")]
    FullMask,
    #[error("external inpainter failed: {0}")]
    External(String),
    #[error("external inpainter timed out after {0:?}")]
    Timeout(Duration),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait Inpainter: Send + Sync {
    /// Replace the masked pixels of `image`. Unmasked pixels must be preserved.
    fn inpaint(&self, image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, InpaintError>;
}

fn check_shapes(image: &RgbImage, mask: &BinaryMask) -> Result<(), InpaintError> {
    if image.dimensions() != mask.dims() {
        return Err(InpaintError::ShapeMismatch {
            img_w: image.width(),
            img_h: image.height(),
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    Ok(())
}

/// Iterative harmonic fill: every masked pixel relaxes toward the mean of its
/// in-bounds 4-neighbours (Gauss-Seidel, row-major sweeps).
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicInpainter {
    pub max_sweeps: usize,
    /// Stop once the largest per-sweep change drops below this.
    pub tolerance: f64,
}

impl Default for HarmonicInpainter {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            tolerance: 0.5,
        }
    }
}

impl Inpainter for HarmonicInpainter {
    fn inpaint(&self, image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, InpaintError> {
        check_shapes(image, mask)?;
        if mask.is_empty() {
            return Ok(image.clone());
        }
        if mask.is_full() {
            return Err(InpaintError::FullMask);
        }
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut buf: Vec<[f64; 3]> = image
            .pixels()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        let masked = |x: usize, y: usize| mask.as_slice()[y * w + x];

        // Seed the hole with the mean colour of the unmasked pixels touching it.
        let mut seed = [0.0; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if masked(x, y) {
                    continue;
                }
                let borders = neighbours(x, y, w, h).any(|(nx, ny)| masked(nx, ny));
                if borders {
                    for c in 0..3 {
                        seed[c] += buf[y * w + x][c];
                    }
                    n += 1;
                }
            }
        }
        for v in &mut seed {
            *v /= n as f64;
        }
        let holes: Vec<usize> = (0..w * h).filter(|&i| mask.as_slice()[i]).collect();
        for &i in &holes {
            buf[i] = seed;
        }

        for _ in 0..self.max_sweeps {
            let mut max_change: f64 = 0.0;
            for &i in &holes {
                let (x, y) = (i % w, i / w);
                let mut acc = [0.0; 3];
                let mut k = 0.0;
                for (nx, ny) in neighbours(x, y, w, h) {
                    let v = buf[ny * w + nx];
                    for c in 0..3 {
                        acc[c] += v[c];
                    }
                    k += 1.0;
                }
                for c in 0..3 {
                    let new = acc[c] / k;
                    max_change = max_change.max((new - buf[i][c]).abs());
                    buf[i][c] = new;
                }
            }
            if max_change < self.tolerance {
                break;
            }
        }

        let mut out = image.clone();
        for &i in &holes {
            let p = out.get_pixel_mut((i % w) as u32, (i / w) as u32);
            for c in 0..3 {
                p[c] = buf[i][c].round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(out)
    }
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let cands = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ];
    cands.into_iter().filter(move |&(nx, ny)| nx < w && ny < h)
}

/// Runs a shell command that reads `inpaint_in.png` and `inpaint_mask.png`
/// from its working directory and writes `inpaint_out.png`.
///
/// Each call gets its own numbered subdirectory of `work_dir`, so one
/// instance can be shared across worker threads. Subdirectories of failed
/// calls are left in place for inspection.
#[derive(Clone, Debug)]
pub struct ExternalInpainter {
    pub command: String,
    pub work_dir: PathBuf,
    pub timeout: Duration,
}

pub const EXTERNAL_INPUT: &str = "inpaint_in.png";
pub const EXTERNAL_MASK: &str = "inpaint_mask.png";
pub const EXTERNAL_OUTPUT: &str = "inpaint_out.png";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InpaintError + '_ {
    move |source| InpaintError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn image_err(e: image::ImageError) -> InpaintError {
    InpaintError::External(e.to_string())
}

impl Inpainter for ExternalInpainter {
    fn inpaint(&self, image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, InpaintError> {
        static CALLS: AtomicU64 = AtomicU64::new(0);
        check_shapes(image, mask)?;
        let dir = self.work_dir.join(format!(
            "call_{}_{}",
            std::process::id(),
            CALLS.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let out_path = dir.join(EXTERNAL_OUTPUT);
        image.save(dir.join(EXTERNAL_INPUT)).map_err(image_err)?;
        mask.to_gray()
            .save(dir.join(EXTERNAL_MASK))
            .map_err(image_err)?;

        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .current_dir(&dir)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(io_err(&dir))?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(io_err(&dir))? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(InpaintError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut e) = child.stderr.take() {
                use std::io::Read;
                let _ = e.read_to_string(&mut stderr);
            }
            return Err(InpaintError::External(format!(
                "command exited with {status}: {}",
                stderr.trim()
            )));
        }
        let result = image::open(&out_path).map_err(image_err)?.to_rgb8();
        if result.dimensions() != image.dimensions() {
            return Err(InpaintError::External(format!(
                "output is {:?}, expected {:?}",
                result.dimensions(),
                image.dimensions()
            )));
        }
        let _ = std::fs::remove_dir_all(&dir);
        Ok(result)
    }
}
