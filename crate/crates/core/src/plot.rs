//! Minimal line-chart rasterizer for report figures. No text rendering:
//! axes, a light grid and one colored polyline per series.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub(crate) struct Series {
    pub points: Vec<(f64, f64)>,
    /// Draw as bars from the x axis instead of a polyline.
    pub bars: bool,
}

pub(crate) fn color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

pub(crate) fn line_chart(path: &Path, series: &[Series], width: u32, height: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (ml, mr, mt, mb) = (40i64, 12i64, 12i64, 30i64);
    let (pw, ph) = (width as i64 - ml - mr, height as i64 - mt - mb);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if series.iter().any(|s| s.bars) {
        y0 = y0.min(0.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| ml + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
    let py = |y: f64| mt + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;

    let grid = Rgb([225, 225, 225]);
    for k in 1..5 {
        let gy = mt + ph * k / 5;
        let gx = ml + pw * k / 5;
        segment(&mut img, (ml, gy), (ml + pw, gy), grid);
        segment(&mut img, (gx, mt), (gx, mt + ph), grid);
    }
    let axis = Rgb([0, 0, 0]);
    segment(&mut img, (ml, mt + ph), (ml + pw, mt + ph), axis);
    segment(&mut img, (ml, mt), (ml, mt + ph), axis);
    for k in 0..=5 {
        let gx = ml + pw * k / 5;
        let gy = mt + ph * k / 5;
        segment(&mut img, (gx, mt + ph), (gx, mt + ph + 4), axis);
        segment(&mut img, (ml - 4, gy), (ml, gy), axis);
    }

    for (i, s) in series.iter().enumerate() {
        let c = Rgb(color(i));
        let pts: Vec<(i64, i64)> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| (px(x), py(y))).collect();
        if s.bars {
            let n = pts.len().max(1) as i64;
            let half = (pw / n / 2 - 1).max(0);
            let base = py(0.0f64.max(y0));
            for &(x, y) in &pts {
                for bx in x - half..=x + half {
                    segment(&mut img, (bx, base), (bx, y), c);
                }
            }
        } else {
            for w in pts.windows(2) {
                thick_segment(&mut img, w[0], w[1], c);
            }
            for &p in &pts {
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        put(&mut img, p.0 + dx, p.1 + dy, c);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    // Bresenham.
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if (x, y) == b {
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

fn thick_segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
        segment(img, (a.0 + ox, a.1 + oy), (b.0 + ox, b.1 + oy), c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_in_their_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let s = vec![Series { points: vec![(0.0, 0.0), (1.0, 1.0)], bars: false }, Series { points: vec![(0.0, 1.0), (1.0, 0.0)], bars: false }];
        line_chart(&p, &s, 200, 120).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        let has = |c: [u8; 3]| img.pixels().any(|px| px.0 == c);
        assert!(has(color(0)) && has(color(1)));
    }

    #[test]
    fn degenerate_ranges_do_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        line_chart(&dir.path().join("a.png"), &[Series { points: vec![(1.0, 2.0)], bars: true }], 64, 48).unwrap();
        line_chart(&dir.path().join("b.png"), &[], 64, 48).unwrap();
    }
}
