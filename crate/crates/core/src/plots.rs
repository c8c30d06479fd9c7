//! Small raster plots drawn straight into image buffers.

use image::{GrayImage, Rgb, RgbImage};

use crate::mask::BinaryMask;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const LINE: Rgb<u8> = Rgb([30, 90, 200]);
const CONTOUR: Rgb<u8> = Rgb([0, 255, 0]);

// 3x5 digit glyphs, one row per u8 with the low three bits used.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, c);
        }
    }
}

/// Draw a non-negative integer with its top-left corner at (x, y).
pub fn draw_number(img: &mut RgbImage, x: i64, y: i64, value: u64, scale: i64, c: Rgb<u8>) {
    for (i, ch) in value.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let ox = x + i as i64 * 4 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    fill_rect(
                        img,
                        ox + col * scale,
                        y + row as i64 * scale,
                        scale,
                        scale,
                        c,
                    );
                }
            }
        }
    }
}

/// Reduction rate against cycle count. The y axis spans [0, 1] with grid
/// lines every 0.25; one tick per cycle on the x axis.
pub fn reduction_curve_plot(values: &[f64]) -> RgbImage {
    let (w, h, m) = (420i64, 300i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, WHITE);
    let (pw, ph) = (w - 2 * m, h - 2 * m);
    for q in 0..=4 {
        let y = m + ph - ph * q / 4;
        line(&mut img, (m, y), (m + pw, y), GRID);
    }
    line(&mut img, (m, m), (m, m + ph), BLACK);
    line(&mut img, (m, m + ph), (m + pw, m + ph), BLACK);
    if values.is_empty() {
        return img;
    }
    let n = values.len() as i64;
    let point = |t: usize, v: f64| -> (i64, i64) {
        let x = m + pw * (t as i64 + 1) / n;
        let y = m + ph - (v.clamp(0.0, 1.0) * ph as f64).round() as i64;
        (x, y)
    };
    let mut prev = (m, m + ph);
    for (t, &v) in values.iter().enumerate() {
        let p = point(t, v);
        line(&mut img, prev, p, LINE);
        fill_rect(&mut img, p.0 - 2, p.1 - 2, 5, 5, LINE);
        line(&mut img, (p.0, m + ph), (p.0, m + ph + 4), BLACK);
        draw_number(&mut img, p.0 - 1, m + ph + 8, t as u64 + 1, 1, BLACK);
        prev = p;
    }
    img
}

/// Grade transition counts as a heat map: rows are label grades, columns
/// final predicted grades, shade scaled by the largest count.
pub fn transition_heatmap<const K: usize>(matrix: &[[u64; K]; K]) -> RgbImage {
    let cell = 48i64;
    let m = 20i64;
    let side = (2 * m + cell * K as i64) as u32;
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    let max = matrix.iter().flatten().copied().max().unwrap_or(0).max(1);
    for (r, row) in matrix.iter().enumerate() {
        draw_number(
            &mut img,
            6,
            m + r as i64 * cell + cell / 2 - 5,
            r as u64,
            2,
            BLACK,
        );
        for (c, &v) in row.iter().enumerate() {
            let f = v as f64 / max as f64;
            let shade = Rgb([
                (255.0 * (1.0 - 0.85 * f)) as u8,
                (255.0 * (1.0 - 0.6 * f)) as u8,
                255,
            ]);
            let (x, y) = (m + c as i64 * cell, m + r as i64 * cell);
            fill_rect(&mut img, x, y, cell - 1, cell - 1, shade);
            let ink = if f > 0.5 { WHITE } else { BLACK };
            draw_number(&mut img, x + 6, y + 6, v, 2, ink);
        }
    }
    for c in 0..K {
        draw_number(
            &mut img,
            m + c as i64 * cell + cell / 2 - 3,
            4,
            c as u64,
            2,
            BLACK,
        );
    }
    img
}

/// `image` with the boundary of `mask` drawn in green. A boundary pixel is a
/// mask pixel with a 4-neighbour outside the mask or on the image edge.
pub fn contour_overlay(image: &RgbImage, mask: &BinaryMask) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = mask.dims();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.put_pixel(x, y, CONTOUR);
            }
        }
    }
    out
}

/// One montage row: original, saliency, contours over the original, inpainted.
pub struct MontageRow<'a> {
    pub original: &'a RgbImage,
    pub saliency: &'a GrayImage,
    pub mask: &'a BinaryMask,
    pub inpainted: &'a RgbImage,
}

/// Four-column grid, one row per iteration, 2 px white gutters.
pub fn montage(rows: &[MontageRow<'_>]) -> RgbImage {
    const GAP: u32 = 2;
    let Some(first) = rows.first() else {
        return RgbImage::from_pixel(1, 1, WHITE);
    };
    let (tw, th) = first.original.dimensions();
    let mut img = RgbImage::from_pixel(
        4 * tw + 5 * GAP,
        rows.len() as u32 * (th + GAP) + GAP,
        WHITE,
    );
    for (r, row) in rows.iter().enumerate() {
        let sal = RgbImage::from_fn(tw, th, |x, y| {
            let v = row.saliency.get_pixel(x, y)[0];
            Rgb([v, v, v])
        });
        let tiles = [
            row.original.clone(),
            sal,
            contour_overlay(row.original, row.mask),
            row.inpainted.clone(),
        ];
        let y0 = GAP + r as u32 * (th + GAP);
        for (c, tile) in tiles.iter().enumerate() {
            let x0 = GAP + c as u32 * (tw + GAP);
            for (x, y, p) in tile.enumerate_pixels() {
                img.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    img
}
