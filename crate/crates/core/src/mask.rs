//! Binary masks and the small amount of morphology the pipeline needs.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

/// An H×W binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![true; (width * height) as usize],
        }
    }

    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), (width * height) as usize, "mask size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Nonzero pixels of a grayscale image are set.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] > 0).collect(),
        }
    }

    /// 0/255 grayscale rendering.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    /// Panics on shape mismatch.
    pub fn and(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    pub fn not(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn union_in_place(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims(), "mask shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        assert_eq!(self.dims(), other.dims(), "mask shape mismatch");
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.dims(), other.dims(), "mask shape mismatch");
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Erosion with the 3×3 cross. Pixels outside the image count as unset.
    pub fn erode_cross(&self) -> Self {
        let (w, h) = (self.width as i64, self.height as i64);
        Self::from_fn(self.width, self.height, |x, y| {
            CROSS
                .iter()
                .all(|&(dx, dy)| self.get_signed(x as i64 + dx, y as i64 + dy, w, h))
        })
    }

    /// Dilation with the 3×3 cross.
    pub fn dilate_cross(&self) -> Self {
        let (w, h) = (self.width as i64, self.height as i64);
        Self::from_fn(self.width, self.height, |x, y| {
            CROSS
                .iter()
                .any(|&(dx, dy)| self.get_signed(x as i64 + dx, y as i64 + dy, w, h))
        })
    }

    pub fn open_cross(&self) -> Self {
        self.erode_cross().dilate_cross()
    }

    pub fn close_cross(&self) -> Self {
        self.dilate_cross().erode_cross()
    }

    #[inline]
    fn get_signed(&self, x: i64, y: i64, w: i64, h: i64) -> bool {
        x >= 0 && y >= 0 && x < w && y < h && self.data[(y * w + x) as usize]
    }

    /// 8-connected components, each as a list of `(x, y)` pixels in scan order.
    pub fn components(&self) -> Vec<Vec<(u32, u32)>> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut seen = vec![false; self.data.len()];
        let mut out = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                let (x, y) = ((i as i64) % w, (i as i64) / w);
                comp.push((x as u32, y as u32));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if self.data[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            comp.sort_unstable_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
        out
    }
}

const CROSS: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra() {
        let a = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 4, |_, y| y < 2);
        assert_eq!(a.and(&b).pixel_count(), 4);
        assert_eq!(a.or(&b).pixel_count(), 12);
        assert_eq!(a.not().pixel_count(), 8);
        assert!(a.and(&b).is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
    }

    #[test]
    fn cross_opening_keeps_3x3_and_kills_single_pixels() {
        let mut m = BinaryMask::empty(9, 9);
        for y in 2..5 {
            for x in 2..5 {
                m.set(x, y, true);
            }
        }
        m.set(7, 7, true);
        let opened = m.open_cross();
        assert!(!opened.get(7, 7));
        assert!(opened.get(3, 3));
        // cross opening of a square drops its corners
        assert_eq!(opened.pixel_count(), 5);
    }

    #[test]
    fn components_use_8_connectivity() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(4, 4, true);
        let comps = m.components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn gray_roundtrip() {
        let m = BinaryMask::from_fn(6, 3, |x, y| (x + y) % 2 == 0);
        assert_eq!(BinaryMask::from_gray(&m.to_gray()), m);
    }
}
