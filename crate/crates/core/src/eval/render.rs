//! Raster output: FROC plot and detection overlays.

use image::{Rgb as Pixel, RgbImage};

use super::{FrocCurve, FP_RATES};
use crate::geometry::BBox;

pub type Rgb = [u8; 3];
pub const BLUE: Rgb = [0, 0, 255];
pub const GREEN: Rgb = [0, 200, 0];
pub const RED: Rgb = [255, 0, 0];
const BLACK: Rgb = [0, 0, 0];
const GREY: Rgb = [200, 200, 200];
const WHITE: Rgb = [255, 255, 255];

/// 3x5 glyphs for `0-9` and `.`; each row is 3 bits, MSB on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b000, 0b000, 0b000, 0b000, 0b010],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Pixel(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
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

fn rect(img: &mut RgbImage, b: &BBox<f64>, c: Rgb) {
    let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
    let (x2, y2) = ((b.x2.ceil() as i64 - 1).max(x1), (b.y2.ceil() as i64 - 1).max(y1));
    line(img, (x1, y1), (x2, y1), c);
    line(img, (x2, y1), (x2, y2), c);
    line(img, (x2, y2), (x1, y2), c);
    line(img, (x1, y2), (x1, y1), c);
}

/// Draws digits and dots of `text` with its top-left corner at `(x, y)`.
fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, c: Rgb) {
    let mut cx = x;
    for ch in s.chars() {
        let glyph = match ch {
            '0'..='9' => Some(&GLYPHS[ch as usize - '0' as usize]),
            '.' => Some(&GLYPHS[10]),
            _ => None,
        };
        if let Some(g) = glyph {
            for (r, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        put(img, cx + col, y + r as i64, c);
                    }
                }
            }
        }
        cx += 4;
    }
}

/// Overlay on a grey image: ground truth in blue, true positives in green,
/// false positives in red, each detection labelled with its confidence at the
/// box's top-left corner. `gray` is row-major `height x width`, scaled to `[0, 1]`.
pub fn draw_overlay(
    gray: &[f64],
    width: usize,
    height: usize,
    gts: &[BBox<f64>],
    dets: &[(BBox<f64>, f64, bool)],
) -> RgbImage {
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, v) in gray.iter().enumerate().take(width * height) {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel((i % width) as u32, (i / width) as u32, Pixel([g, g, g]));
    }
    for b in gts {
        rect(&mut img, b, BLUE);
    }
    for (b, conf, tp) in dets {
        let c = if *tp { GREEN } else { RED };
        rect(&mut img, b, c);
        text(&mut img, &format!("{conf:.2}"), b.x1.floor() as i64 + 1, b.y1.floor() as i64 + 1, c);
    }
    img
}

/// Sensitivity against average FPs per scan on a log2 axis from 1/8 to 32.
pub fn plot_froc(curve: &FrocCurve) -> RgbImage {
    let (w, h) = (480u32, 360u32);
    let (left, right, top, bottom) = (40i64, 460i64, 20i64, 330i64);
    let mut img = RgbImage::from_pixel(w, h, Pixel(WHITE));
    let (lo, hi) = (-3.0f64, 5.0f64);
    let px = |fp: f64| -> i64 {
        let l = fp.max(2f64.powf(lo)).log2().min(hi);
        left + ((l - lo) / (hi - lo) * (right - left) as f64).round() as i64
    };
    let py = |s: f64| -> i64 { bottom - (s.clamp(0.0, 1.0) * (bottom - top) as f64).round() as i64 };
    for s in [0.25, 0.5, 0.75, 1.0] {
        line(&mut img, (left, py(s)), (right, py(s)), GREY);
    }
    for f in FP_RATES {
        line(&mut img, (px(f), top), (px(f), bottom), GREY);
    }
    line(&mut img, (left, bottom), (right, bottom), BLACK);
    line(&mut img, (left, top), (left, bottom), BLACK);
    for f in FP_RATES {
        text(&mut img, &format!("{f}"), px(f) - 4, bottom + 6, BLACK);
    }
    for s in [0.0, 0.5, 1.0] {
        text(&mut img, &format!("{s:.1}"), 8, py(s) - 2, BLACK);
    }
    let mut prev: Option<(i64, i64)> = None;
    for p in &curve.points {
        let cur = (px(p.avg_fp), py(p.sensitivity));
        if let Some(q) = prev {
            line(&mut img, q, (cur.0, q.1), BLUE);
            line(&mut img, (cur.0, q.1), cur, BLUE);
        }
        prev = Some(cur);
    }
    if let Some(q) = prev {
        line(&mut img, q, (right, q.1), BLUE);
    }
    for (f, s) in FP_RATES.iter().zip(curve.sens_at) {
        let (x, y) = (px(*f), py(s));
        for d in -2..=2 {
            put(&mut img, x + d, y, RED);
            put(&mut img, x, y + d, RED);
        }
    }
    img
}
